"""The single-loop optimiser: group advantages, clipped updates, unified loss.

One step runs, in order: sample groups -> base + gated/autoscaled MI rewards
-> group advantages -> score matrix for the symmetric InfoNCE auxiliary ->
OT regulariser -> total loss -> one SGD step, then emits a StepReport.  The
loss identity

    total = grpo + sami_weight(step) * sami + shaping + ot

holds at every step (ot already carries its weight and warmup gate).  The
clipped surrogate works on sequence-level ratios with token sums divided by a
fixed length constant (the completion cap), which removes length bias without
per-sequence normalisation:

    r = exp((new - old) / length_norm_constant)
    contribution = -min(r * A, clip(r, 1-eps, 1+eps) * A)

Schedules: sami_weight ramps linearly over mi_warmup_steps; the row/column
mix anneals (0.7, 0.3) -> (0.5, 0.5) over the first 10% of max_steps; the OT
term is zero before ot_warmup; the format gate activates after 30% of the MI
warmup.  Everything is deterministic under (config, seed): stochastic
channels draw from seeds derived via SeedSequence(seed, step, channel, index).

The optimiser is plain SGD with a global gradient-norm clip; external
trainer defaults do not transfer to this scale.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import mi, ot, prob_metrics, rep_metrics, rewards
from .errors import ValidationError
from .policy import ParamGrad, ToyPolicy, ToyTask, reference_policy, toy_format_reward

STEPS_JSONL_FIELDS = (
    "step", "reward_base_mean", "reward_mi_mean", "reward_std",
    "loss_total", "loss_grpo", "loss_sami", "loss_ot",
    "mi_row_clean", "mi_col_clean", "mi_gap", "diag_mi",
    "grad_norm", "entropy", "clean_count",
    "bhat_angle", "hellinger", "js_bits", "frechet", "effrank", "pr",
)

ABLATION_MODES = ("enigma", "grpo_cot", "grpo_cot_plus")

# Seed-derivation channel ids.
_CH_SAMPLE, _CH_SHADOW_P, _CH_SHADOW_C, _CH_OT, _CH_JITTER = range(5)


def derive_rng(seed: int, step: int, channel: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, step, channel, index)))


@dataclass(frozen=True)
class TrainConfig:
    """Trainer hyperparameters; defaults follow the reference run configuration."""

    group_size: int = 4
    clip_eps: float = 0.1
    kl_beta: float = 0.0            # config slot exists; default-off, unused
    sami_weight: float = 0.05
    mi_warmup_steps: int = 50
    ot_weight: float = 0.01
    ot_warmup: int = 200
    blur: float = 0.12
    scaling: float = 0.8
    ot_subsample_cap: int = 512
    shadow_k: int = 2
    entropy_quantile: float = 0.8
    channel_weight: float = 0.15
    sigmoid_slope: float = 2.5
    autoscale_target: float = 0.2
    autoscale_eta: float = 0.05
    ema_decay: float = 0.99
    scale_rewards: str = "group"
    mask_truncated: bool = True
    length_norm_constant: int = 12
    shaping_weight: float = 0.0
    jitter_sigma: float = 0.0
    learning_rate: float = 0.05
    grad_clip: float = 1.0
    prompts_per_batch: int = 8

    def __post_init__(self):
        if self.group_size < 2:
            raise ValidationError("group size must be at least 2")
        if not (0.0 < self.clip_eps < 1.0):
            raise ValidationError("clip epsilon must lie in (0, 1)")
        if self.scale_rewards not in ("group", "none"):
            raise ValidationError("scale_rewards must be 'group' or 'none'")
        for name in ("sami_weight", "ot_weight", "channel_weight", "shaping_weight",
                     "jitter_sigma", "kl_beta", "autoscale_eta", "learning_rate"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")

    def with_ablation(self, mode: str) -> "TrainConfig":
        """Run-matrix presets: the full objective or the two policy-only ablations."""
        if mode not in ABLATION_MODES:
            raise ValidationError(f"unknown ablation mode {mode!r}")
        if mode == "enigma":
            return self
        jitter = 0.5 if mode == "grpo_cot_plus" else 0.0
        return replace(self, sami_weight=0.0, ot_weight=0.0, channel_weight=0.0,
                       shaping_weight=0.0, jitter_sigma=jitter)


@dataclass(frozen=True)
class GroupAdvantages:
    advantages: np.ndarray
    mean: float
    std: float


def group_advantages(group_rewards, mode: str = "group") -> GroupAdvantages:
    """Centred (and optionally std-scaled) within-group advantages.

    A zero-variance group yields all-zero advantages: no learning signal.
    """
    r = np.asarray(group_rewards, dtype=float)
    if r.size < 2:
        raise ValidationError("a group needs at least 2 rewards")
    if mode not in ("group", "none"):
        raise ValidationError("mode must be 'group' or 'none'")
    mean = float(r.mean())
    std = float(r.std())
    adv = r - mean
    if mode == "group":
        if std > 1e-12:
            adv = adv / std
        else:
            adv = np.zeros_like(adv)
    return GroupAdvantages(adv, mean, std)


def clipped_surrogate(new_logp: float, old_logp: float, advantage: float,
                      clip_eps: float, length_norm_constant: float = 1.0) -> float:
    """Loss contribution -min(r A, clip(r) A) with a sequence-level ratio."""
    log_ratio = (float(new_logp) - float(old_logp)) / float(length_norm_constant)
    r = math.exp(log_ratio)
    clipped = min(max(r, 1.0 - clip_eps), 1.0 + clip_eps)
    return -min(r * advantage, clipped * advantage)


def surrogate_grad_coefficient(new_logp: float, old_logp: float, advantage: float,
                               clip_eps: float, length_norm_constant: float = 1.0) -> float:
    """d(contribution)/d(new_logp); zero whenever the clipped branch is active.

    For positive advantages the loss is constant in r beyond 1+eps, for
    negative ones below 1-eps, so ratio growth past the band is never rewarded.
    """
    log_ratio = (float(new_logp) - float(old_logp)) / float(length_norm_constant)
    r = math.exp(log_ratio)
    if advantage >= 0:
        active = r <= 1.0 + clip_eps
    else:
        active = r >= 1.0 - clip_eps
    if not active:
        return 0.0
    return -advantage * r / float(length_norm_constant)


def rowcol_anneal(step: int, max_steps: int) -> tuple:
    """(lam_row, lam_col): linear (0.7, 0.3) -> (0.5, 0.5) over 10% of max_steps."""
    if max_steps <= 0:
        raise ValidationError("max_steps must be positive")
    span = 0.1 * max_steps
    t = 1.0 if span <= 0 else min(1.0, step / span)
    return 0.7 - 0.2 * t, 0.3 + 0.2 * t


def sami_weight_at(config: TrainConfig, step: int) -> float:
    """Linear warmup of the auxiliary weight over mi_warmup_steps."""
    if config.mi_warmup_steps <= 0:
        return config.sami_weight
    return config.sami_weight * min(1.0, step / config.mi_warmup_steps)


def enigma_loss(grpo_term: float, sami_term: float, shaping_term: float,
                ot_term: float, config: TrainConfig, step: int) -> float:
    """Unified objective with schedules applied; ot_term is gated by warmup."""
    gated_ot = 0.0 if step < config.ot_warmup else ot_term
    return grpo_term + sami_weight_at(config, step) * sami_term + shaping_term + gated_ot


@dataclass(frozen=True)
class StepReport:
    """Everything logged for one step; the JSONL row is a fixed subset."""

    step: int
    reward_base_mean: float
    reward_mi_mean: float
    reward_total_mean: float
    reward_std: float
    loss_grpo: float
    loss_sami: float
    loss_shaping: float
    loss_ot: float
    loss_total: float
    mi_row_clean: float
    mi_col_clean: float
    mi_gap: float
    diag_mi: float
    grad_norm: float
    entropy: float
    clean_count: int
    bhat_angle: float
    hellinger: float
    js_bits: float
    frechet: float
    effrank: float
    pr: float
    beta: float = 1.0

    def jsonl_row(self) -> dict:
        values = {
            "step": self.step,
            "reward_base_mean": self.reward_base_mean,
            "reward_mi_mean": self.reward_mi_mean,
            "reward_std": self.reward_std,
            "loss_total": self.loss_total,
            "loss_grpo": self.loss_grpo,
            "loss_sami": self.loss_sami,
            "loss_ot": self.loss_ot,
            "mi_row_clean": self.mi_row_clean,
            "mi_col_clean": self.mi_col_clean,
            "mi_gap": self.mi_gap,
            "diag_mi": self.diag_mi,
            "grad_norm": self.grad_norm,
            "entropy": self.entropy,
            "clean_count": self.clean_count,
            "bhat_angle": self.bhat_angle,
            "hellinger": self.hellinger,
            "js_bits": self.js_bits,
            "frechet": self.frechet,
            "effrank": self.effrank,
            "pr": self.pr,
        }
        return {k: values[k] for k in STEPS_JSONL_FIELDS}


class Trainer:
    """Owns the mutable policy, reference snapshot, and autoscaler state."""

    def __init__(self, policy: ToyPolicy, task: ToyTask, config: TrainConfig,
                 max_steps: int, seed: int):
        if max_steps <= 0:
            raise ValidationError("max_steps must be positive")
        self.policy = policy
        self.task = task
        self.config = config
        self.max_steps = max_steps
        self.seed = seed
        self.step = 0
        self.reference = reference_policy(policy)
        self.autoscaler = rewards.AutoscalerState(
            target_ratio=config.autoscale_target, rate=config.autoscale_eta,
            decay=config.ema_decay)
        self._probe_item = task.items[0]

    # ---------- helpers ----------

    def _batch_items(self, step: int) -> list:
        n = len(self.task.items)
        start = (step * self.config.prompts_per_batch) % n
        return [self.task.items[(start + j) % n]
                for j in range(self.config.prompts_per_batch)]

    def _principle_tokens(self, pid: str) -> tuple:
        return self.task.principle(pid).tokens

    def _row_candidate_scores(self, items, completions, groups, step: int) -> np.ndarray:
        """(B, K+1) length-normalised scores of each completion under its true
        principle (column 0) and K uniform shadow principles."""
        k = self.config.shadow_k
        pool = [p.pid for p in self.task.principles]
        rng = derive_rng(self.seed, step, _CH_SHADOW_P)
        out = np.zeros((len(completions), k + 1))
        for idx, (g, comp) in enumerate(zip(groups, completions)):
            item = items[g]
            draw = mi.draw_shadows(pool, item.principle_id, k, rng)
            contexts = [(item.prompt, self._principle_tokens(item.principle_id))]
            contexts += [(item.prompt, self._principle_tokens(pid))
                         for pid in draw.shadow_ids]
            sums = self.policy.multi_context_logprob(contexts, comp.tokens)
            out[idx] = sums / max(1, comp.length)
        return out

    def _col_candidate_scores(self, items, completions, groups, step: int) -> np.ndarray:
        """(B, K+1) scores of {own completion, K shadow completions} under each
        completion's own rendered prompt."""
        k = self.config.shadow_k
        rng = derive_rng(self.seed, step, _CH_SHADOW_C)
        b = len(completions)
        out = np.zeros((b, k + 1))
        for idx in range(b):
            item = items[groups[idx]]
            others = [j for j in range(b) if j != idx]
            if len(others) >= k:
                picked = [others[int(i)] for i in rng.choice(len(others), size=k, replace=False)]
            else:
                picked = [others[int(i)] for i in rng.choice(len(others), size=k, replace=True)]
            cands = [completions[idx].tokens] + [completions[j].tokens for j in picked]
            sums, lengths = self.policy.sequence_logprobs_batch(
                item.prompt, self._principle_tokens(item.principle_id), cands)
            out[idx] = sums / np.maximum(1, lengths)
        return out

    def _sami_matrix(self, items, completions, groups) -> tuple:
        """Square cross-query score matrix over kept rows; returns (L, kept)."""
        if self.config.mask_truncated:
            kept = [i for i, c in enumerate(completions) if not c.truncated]
        else:
            kept = list(range(len(completions)))
        n = len(kept)
        if n < 2:
            return None, kept
        lengths = np.array([max(1, completions[i].length) for i in kept])
        scores = np.zeros((n, n))
        # Columns sharing a group share the rendered prompt: one batched
        # scoring pass per distinct group.
        for g in sorted(set(groups[i] for i in kept)):
            cols = [j for j, i in enumerate(kept) if groups[i] == g]
            item = items[g]
            sums, _ = self.policy.sequence_logprobs_batch(
                item.prompt, self._principle_tokens(item.principle_id),
                [completions[i].tokens for i in kept])
            for j in cols:
                scores[:, j] = sums / lengths
        return mi.ScoreMatrix(scores, normalisation="length_mean"), kept

    def _sami_gradient(self, matrix: mi.ScoreMatrix, kept, items, completions,
                       groups, lam_row: float, lam_col: float,
                       shaping_mask) -> tuple:
        """Fold auxiliary + shaping weights into one matrix and backpropagate.

        Returns (sami_grad, shaping_grad) as ParamGrads over all blocks.
        """
        scores = matrix.scores
        n = scores.shape[0]
        eye = np.eye(n)
        soft_row = np.exp(scores - scores.max(axis=1, keepdims=True))
        soft_row /= soft_row.sum(axis=1, keepdims=True)
        soft_col = np.exp(scores - scores.max(axis=0, keepdims=True))
        soft_col /= soft_col.sum(axis=0, keepdims=True)
        d_row = -(eye - soft_row) / n
        d_col = -(eye - soft_col) / n
        w_sami = lam_row * d_row + lam_col * d_col
        w_shape = np.zeros_like(scores)
        if self.config.shaping_weight > 0 and shaping_mask.any():
            coeff = (shaping_mask.astype(float) / shaping_mask.sum()) - 1.0 / n
            w_shape = self.config.shaping_weight * coeff[:, None] * (soft_row - eye)
        lengths = np.array([max(1, completions[i].length) for i in kept], dtype=float)
        grads = []
        for w in (w_sami, w_shape):
            grad = ParamGrad.zeros(self.policy.vocab.size, self.policy.dim)
            if np.any(w):
                for g in sorted(set(groups[i] for i in kept)):
                    cols = [j for j, i in enumerate(kept) if groups[i] == g]
                    item = items[g]
                    coeffs = w[:, cols].sum(axis=1) / lengths
                    grad.add(self.policy.weighted_grad_batch(
                        item.prompt, self._principle_tokens(item.principle_id),
                        [completions[i].tokens for i in kept], coeffs))
            grads.append(grad)
        return grads[0], grads[1]

    def _hidden_measures(self, items, completions, groups) -> tuple:
        cur, ref = [], []
        for idx, comp in enumerate(completions):
            if comp.length == 0:
                continue
            item = items[groups[idx]]
            ptoks = self._principle_tokens(item.principle_id)
            cur.append(self.policy.hidden_summary(item.prompt, ptoks, comp.tokens))
            ref.append(self.reference.hidden_summary(item.prompt, ptoks, comp.tokens))
        cur_m = rep_metrics.EmpiricalMeasure(np.stack(cur), normalised=True)
        ref_m = rep_metrics.EmpiricalMeasure(np.stack(ref), normalised=True)
        return cur_m, ref_m

    # ---------- the step ----------

    def train_step(self) -> StepReport:
        """One full optimisation step; state mutates only on success."""
        config = self.config
        step = self.step
        items = self._batch_items(step)
        groups, completions = [], []
        for g, item in enumerate(items):
            group = self.policy.sample_group(
                item.prompt, self._principle_tokens(item.principle_id),
                config.group_size, derive_rng(self.seed, step, _CH_SAMPLE, g))
            for comp in group:
                groups.append(g)
                completions.append(comp)
        b = len(completions)

        entropies = np.array([c.mean_entropy for c in completions])
        entropy_mask = rewards.entropy_gate(entropies, config.entropy_quantile)
        format_ok = np.array([
            (not c.truncated) and toy_format_reward(c.content, self.policy.vocab) == 1.0
            for c in completions])

        base = format_ok.astype(float)
        base[[c.truncated for c in completions]] = 0.0
        if config.jitter_sigma > 0:
            jitter_rng = derive_rng(self.seed, step, _CH_JITTER)
            base = base + config.jitter_sigma * jitter_rng.standard_normal(b)

        row_scores = self._row_candidate_scores(items, completions, groups, step)
        format_gate_on = rewards.format_gate_schedule(step, config.mi_warmup_steps)
        mi_reward = np.zeros(b)
        if config.channel_weight > 0:
            z = mi.row_positive_logsoftmax(mi.ScoreMatrix(row_scores), standardise=True)
            for i in range(b):
                gates = rewards.GateState(
                    entropy_pass=bool(entropy_mask[i]),
                    format_pass=bool(format_ok[i]) if format_gate_on else True)
                mi_reward[i] = rewards.mi_tiebreak_reward(
                    z[i], config.sigmoid_slope, config.channel_weight, gates,
                    self.autoscaler)
        total_reward = base + mi_reward

        adv = np.zeros(b)
        group_stds = []
        for g in range(len(items)):
            sel = [i for i in range(b) if groups[i] == g]
            ga = group_advantages(total_reward[sel], config.scale_rewards)
            adv[sel] = ga.advantages
            group_stds.append(ga.std)

        # GRPO term: new == old at compute time, so the value is -mean(A) and
        # the gradient coefficient reduces to -A / length constant.
        loss_grpo_sum = 0.0
        counted = 0
        per_group = {g: ([], []) for g in range(len(items))}
        for i in range(b):
            if config.mask_truncated and completions[i].truncated:
                continue
            old = float(np.sum(completions[i].logprobs))
            loss_grpo_sum += clipped_surrogate(old, old, adv[i], config.clip_eps,
                                               config.length_norm_constant)
            coef = surrogate_grad_coefficient(old, old, adv[i], config.clip_eps,
                                              config.length_norm_constant)
            per_group[groups[i]][0].append(completions[i].tokens)
            per_group[groups[i]][1].append(coef)
            counted += 1
        loss_grpo = loss_grpo_sum / max(1, counted)
        grpo_grad = ParamGrad.zeros(self.policy.vocab.size, self.policy.dim)
        for g, item in enumerate(items):
            toks, coeffs = per_group[g]
            coeffs = [c / max(1, counted) for c in coeffs]
            if toks and any(coeffs):
                grpo_grad.add(self.policy.weighted_grad_batch(
                    item.prompt, self._principle_tokens(item.principle_id),
                    toks, coeffs))

        lam_row, lam_col = rowcol_anneal(step, self.max_steps)
        matrix, kept = self._sami_matrix(items, completions, groups)
        sami_grad = ParamGrad.zeros(self.policy.vocab.size, self.policy.dim)
        shape_grad = ParamGrad.zeros(self.policy.vocab.size, self.policy.dim)
        if matrix is None:
            loss_sami, loss_shaping, diag_stat = 0.0, 0.0, math.nan
        else:
            losses = mi.infonce_losses(matrix)
            loss_sami = lam_row * losses["row_loss"] + lam_col * losses["col_loss"]
            shaping_mask = entropy_mask[kept]
            loss_shaping = mi.shaping_term(matrix, shaping_mask, config.shaping_weight)
            diag_stat = mi.diag_mi(matrix)
            if sami_weight_at(config, step) > 0 or config.shaping_weight > 0:
                sami_grad, shape_grad = self._sami_gradient(
                    matrix, kept, items, completions, groups, lam_row, lam_col,
                    shaping_mask)

        col_scores = self._col_candidate_scores(items, completions, groups, step)
        clean = mi.clean_mi_bounds(mi.BoundBatch(row_scores, col_scores),
                                   config.shadow_k, format_ok & entropy_mask)

        cur_measure, ref_measure = self._hidden_measures(items, completions, groups)
        loss_ot = 0.0
        ot_grad = ParamGrad.zeros(self.policy.vocab.size, self.policy.dim)
        if config.ot_weight > 0 and step >= config.ot_warmup:
            cap = config.ot_subsample_cap
            live = [i for i, c in enumerate(completions) if c.length > 0]
            cur_idx = ot.subsample_indices(cur_measure.size, cap, (self.seed, step, _CH_OT, 0))
            ref_idx = ot.subsample_indices(ref_measure.size, cap, (self.seed, step, _CH_OT, 1))
            cur_sub = rep_metrics.EmpiricalMeasure(cur_measure.points[cur_idx], normalised=True)
            ref_sub = rep_metrics.EmpiricalMeasure(ref_measure.points[ref_idx], normalised=True)
            # Bounded iteration budget: after eps-scaling the value error is
            # far below what a 0.01-weighted term can feel, and the envelope
            # gradient of the achieved plan stays valid.
            value, point_grad, _ = ot.sinkhorn_divergence_with_grad(
                cur_sub, ref_sub, config.blur ** 2, scaling=config.scaling,
                max_iter=500)
            loss_ot = config.ot_weight * value
            for row, m_row in enumerate(cur_idx):
                idx = live[int(m_row)]
                item = items[groups[idx]]
                ot_grad.add(self.policy.hidden_summary_grad(
                    item.prompt, self._principle_tokens(item.principle_id),
                    completions[idx].tokens,
                    config.ot_weight * point_grad[row]))

        loss_total = enigma_loss(loss_grpo, loss_sami, loss_shaping, loss_ot,
                                 config, step)

        total_grad = ParamGrad.zeros(self.policy.vocab.size, self.policy.dim)
        total_grad.add(grpo_grad)
        total_grad.add(sami_grad, sami_weight_at(config, step))
        total_grad.add(shape_grad)
        total_grad.add(ot_grad)
        grad_norm = total_grad.global_norm()
        if config.grad_clip > 0 and grad_norm > config.grad_clip:
            total_grad = total_grad.scaled(config.grad_clip / grad_norm)

        # Geometry probes against the frozen reference.
        probe_ctx = (self._probe_item.prompt,
                     self._principle_tokens(self._probe_item.principle_id))
        p_cur = prob_metrics.ProbVector(self.policy.next_token_distribution(*probe_ctx))
        p_ref = prob_metrics.ProbVector(self.reference.next_token_distribution(*probe_ctx))
        probes = prob_metrics.probe_report(p_cur, p_ref)
        try:
            frechet = rep_metrics.frechet_distance(
                rep_metrics.fit_gaussian(cur_measure),
                rep_metrics.fit_gaussian(ref_measure))
        except ValidationError:
            frechet = 0.0
        try:
            dims = rep_metrics.effective_dims(rep_metrics.covariance_spectrum(cur_measure))
            effrank, pr = dims["effrank"], dims["participation_ratio"]
        except ValidationError:
            effrank, pr = 1.0, 1.0

        report = StepReport(
            step=step,
            reward_base_mean=float(base.mean()),
            reward_mi_mean=float(mi_reward.mean()),
            reward_total_mean=float(total_reward.mean()),
            reward_std=float(np.mean(group_stds)),
            loss_grpo=float(loss_grpo),
            loss_sami=float(loss_sami),
            loss_shaping=float(loss_shaping),
            loss_ot=float(loss_ot),
            loss_total=float(loss_total),
            mi_row_clean=clean["row_bound"],
            mi_col_clean=clean["col_bound"],
            mi_gap=clean["gap"],
            diag_mi=diag_stat,
            grad_norm=float(grad_norm),
            entropy=float(entropies.mean()),
            clean_count=clean["clean_count"],
            bhat_angle=probes["bhat_angle"],
            hellinger=probes["hellinger"],
            js_bits=probes["js_bits"],
            frechet=float(frechet),
            effrank=float(effrank),
            pr=float(pr),
            beta=self.autoscaler.beta,
        )

        # Commit: parameter update, autoscaler, step counter.
        self.policy.add_scaled(total_grad, -config.learning_rate)
        if config.channel_weight > 0:
            self.autoscaler = rewards.autoscale_update(
                self.autoscaler, float(np.abs(mi_reward).mean()),
                float(np.abs(base).mean()))
        self.step += 1
        return report

    # ---------- checkpoints ----------

    def save_checkpoint(self, path, config_hash: str = "",
                        config_text: str = "") -> str:
        """Write a full parameter snapshot plus run config and step.

        Returns the parameter hash stored for integrity checking.
        """
        blocks = self.policy.param_blocks()
        meta = {"step": self.step, "seed": self.seed, "max_steps": self.max_steps,
                "param_hash": self.policy.param_hash(), "config_hash": config_hash,
                "config_text": config_text,
                "vocab_size": self.policy.vocab.size, "dim": self.policy.dim,
                "schema": 1}
        np.savez(path, meta=json.dumps(meta, sort_keys=True),
                 **{k: v for k, v in blocks.items()},
                 ref_embed=self.reference.embed, ref_out=self.reference.out,
                 ref_ctx_scale=self.reference.ctx_scale,
                 ref_prev_scale=self.reference.prev_scale)
        return meta["param_hash"]


def load_checkpoint(path) -> tuple:
    """(policy, reference, meta) from a snapshot; verifies the stored hash."""
    from .policy import Vocab

    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["meta"]))
    vocab = Vocab(int(meta["vocab_size"]))
    policy = ToyPolicy(vocab, int(meta["dim"]))
    policy.embed = data["embed"].copy()
    policy.out = data["out"].copy()
    policy.ctx_scale = data["ctx_scale"].copy()
    policy.prev_scale = data["prev_scale"].copy()
    ref = ToyPolicy(vocab, int(meta["dim"]))
    ref.embed = data["ref_embed"].copy()
    ref.out = data["ref_out"].copy()
    ref.ctx_scale = data["ref_ctx_scale"].copy()
    ref.prev_scale = data["ref_prev_scale"].copy()
    if policy.param_hash() != meta["param_hash"]:
        raise ValidationError("checkpoint parameter hash mismatch (corrupt file?)")
    return policy, ref, meta
