"""GRPO objective and a tabular plan policy trained under the plan reward.

The policy is a lookup table of per-position logits over a finite set of
candidate steps plus STOP, one table per prompt. It is small enough that every
gradient is closed-form, which lets the objective be checked against finite
differences.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grammar import Ontology, Plan, PlanStep, SkillGrammar, render_plan
from .reward import DEFAULT_WEIGHTS, RewardWeights, step_similarity, total_reward

THINK_TEXT = "Select the listed skills that achieve the request."


class GroupTooSmall(ValueError):
    pass


class NonFiniteLogProb(ValueError):
    pass


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_weight: float = 0.04
    learning_rate: float = 1.0
    steps: int = 2000
    seed: int = 0
    inner_epochs: int = 1
    ref_refresh_every: int | None = None  # None keeps the initial policy as reference

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise GroupTooSmall(f"group_size must be >= 2, got {self.group_size}")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")
        if self.ref_refresh_every is not None and self.ref_refresh_every < 1:
            raise ValueError("ref_refresh_every must be positive or None")


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Standardize rewards within the group (population std; zero-std -> zeros)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got {r.size}")
    centered = r - r.mean()
    std = math.sqrt(float(np.mean(centered * centered)))
    if std == 0.0:
        return np.zeros_like(r)
    return centered / std


def kl_k3(logp_new: np.ndarray, logp_ref: np.ndarray) -> np.ndarray:
    """Per-sample estimator exp(d) - d - 1 with d = logp_ref - logp_new; always >= 0."""
    d = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_new, dtype=np.float64)
    return np.expm1(d) - d


@dataclass
class GrpoGroup:
    responses: list
    rewards: np.ndarray
    advantages: np.ndarray
    logp_old: np.ndarray
    logp_new: np.ndarray
    logp_ref: np.ndarray

    def __post_init__(self) -> None:
        for name in ("rewards", "advantages", "logp_old", "logp_new", "logp_ref"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        b = len(self.advantages)
        if any(len(getattr(self, n)) != b for n in ("logp_old", "logp_new", "logp_ref")):
            raise ValueError("log-probability arrays must all have the group's length")


def _check_finite(group: GrpoGroup) -> None:
    for name in ("logp_old", "logp_new", "logp_ref"):
        if not np.all(np.isfinite(getattr(group, name))):
            raise NonFiniteLogProb(f"{name} contains non-finite values")


def _clipped_mask(ratio: np.ndarray, adv: np.ndarray, eps: float) -> np.ndarray:
    # Samples whose min() picks the constant clipped branch.
    return ((adv > 0) & (ratio > 1 + eps)) | ((adv < 0) & (ratio < 1 - eps))


def grpo_objective(group: GrpoGroup, cfg: GrpoConfig) -> tuple[float, dict]:
    """Return ``(loss, diagnostics)`` where loss is the negated GRPO objective."""
    _check_finite(group)
    adv = group.advantages
    ratio = np.exp(group.logp_new - group.logp_old)
    clipped = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps)
    surrogate = np.minimum(ratio * adv, clipped * adv)
    kl = kl_k3(group.logp_new, group.logp_ref)
    objective = float(np.mean(surrogate - cfg.kl_weight * kl))
    diagnostics = {
        "objective": objective,
        "clip_fraction": float(np.mean(_clipped_mask(ratio, adv, cfg.clip_eps))),
        "kl": float(np.mean(kl)),
        "mean_ratio": float(np.mean(ratio)),
    }
    return -objective, diagnostics


def objective_logp_grad(group: GrpoGroup, cfg: GrpoConfig) -> np.ndarray:
    """d(objective)/d(logp_new_i) for each sample."""
    _check_finite(group)
    adv = group.advantages
    ratio = np.exp(group.logp_new - group.logp_old)
    surrogate = np.where(_clipped_mask(ratio, adv, cfg.clip_eps), 0.0, ratio * adv)
    kl = cfg.kl_weight * np.expm1(group.logp_ref - group.logp_new)
    return (surrogate + kl) / len(adv)


# -- policy ------------------------------------------------------------------


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    top = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - top
    with np.errstate(divide="ignore"):
        return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


@dataclass(frozen=True)
class Sample:
    prompt: int
    actions: tuple[int, ...]  # candidate indices, STOP included when sampled
    text: str
    logp: float


@dataclass
class ToyPlanPolicy:
    """Per-prompt, per-position categorical choice over candidate steps and STOP."""

    vocabulary: tuple[PlanStep, ...]
    logits: np.ndarray  # (prompts, horizon, len(vocabulary) + 1); last column is STOP
    ref_logits: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.logits = np.array(self.logits, dtype=np.float64)
        if self.logits.ndim != 3 or self.logits.shape[2] != len(self.vocabulary) + 1:
            raise ValueError("logits must have shape (prompts, horizon, vocabulary + 1)")
        if self.ref_logits is None:
            self.ref_logits = self.logits.copy()
        else:
            self.ref_logits = np.array(self.ref_logits, dtype=np.float64)

    @classmethod
    def uniform(cls, vocabulary: Sequence[PlanStep], prompts: int, horizon: int) -> "ToyPlanPolicy":
        return cls(tuple(vocabulary), np.zeros((prompts, horizon, len(vocabulary) + 1)))

    @property
    def stop(self) -> int:
        return len(self.vocabulary)

    @property
    def horizon(self) -> int:
        return self.logits.shape[1]

    def probs(self, prompt: int) -> np.ndarray:
        return np.exp(_log_softmax(self.logits[prompt]))

    def render(self, actions: Sequence[int]) -> str:
        steps = [self.vocabulary[a] for a in actions if a != self.stop]
        return f"<think>{THINK_TEXT}</think>\n<answer>\n{render_plan(steps)}\n</answer>"

    def plan(self, actions: Sequence[int]) -> Plan:
        return Plan(tuple(self.vocabulary[a] for a in actions if a != self.stop))

    def sample(self, rng: np.random.Generator, prompt: int = 0) -> Sample:
        probs = self.probs(prompt)
        actions: list[int] = []
        for pos in range(self.horizon):
            a = int(rng.choice(probs.shape[1], p=probs[pos]))
            actions.append(a)
            if a == self.stop:
                break
        actions_t = tuple(actions)
        return Sample(prompt, actions_t, self.render(actions_t), self.log_prob(prompt, actions_t))

    def log_prob(self, prompt: int, actions: Sequence[int], logits: np.ndarray | None = None) -> float:
        table = _log_softmax((self.logits if logits is None else logits)[prompt])
        return float(sum(table[pos, a] for pos, a in enumerate(actions)))

    def ref_log_prob(self, prompt: int, actions: Sequence[int]) -> float:
        return self.log_prob(prompt, actions, self.ref_logits)

    def accumulate_grad(self, samples: Sequence[Sample], coeffs: Sequence[float]) -> np.ndarray:
        """Sum_i coeffs[i] * d logp(sample_i) / d logits."""
        grad = np.zeros_like(self.logits)
        for sample, c in zip(samples, coeffs):
            probs = self.probs(sample.prompt)
            for pos, a in enumerate(sample.actions):
                grad[sample.prompt, pos] -= c * probs[pos]
                grad[sample.prompt, pos, a] += c
        return grad

    def greedy(self, prompt: int) -> tuple[int, ...]:
        actions = []
        for pos in range(self.horizon):
            a = int(np.argmax(self.logits[prompt, pos]))
            actions.append(a)
            if a == self.stop:
                break
        return tuple(actions)

    def refresh_reference(self) -> None:
        self.ref_logits = self.logits.copy()


def policy_sample(policy: ToyPlanPolicy, rng: np.random.Generator, prompt: int = 0) -> tuple[str, float]:
    s = policy.sample(rng, prompt)
    return s.text, s.logp


def build_group(
    policy: ToyPlanPolicy,
    samples: Sequence[Sample],
    rewards: Sequence[float],
    logp_old: Sequence[float] | None = None,
    logp_ref: Sequence[float] | None = None,
) -> GrpoGroup:
    """Assemble a group, evaluating logp_new under the policy's current logits."""
    return GrpoGroup(
        responses=list(samples),
        rewards=np.asarray(rewards, dtype=np.float64),
        advantages=group_advantages(rewards),
        logp_old=[s.logp for s in samples] if logp_old is None else logp_old,
        logp_new=[policy.log_prob(s.prompt, s.actions) for s in samples],
        logp_ref=[policy.ref_log_prob(s.prompt, s.actions) for s in samples] if logp_ref is None else logp_ref,
    )


def analytic_gradient(policy: ToyPlanPolicy, group: GrpoGroup, cfg: GrpoConfig) -> np.ndarray:
    """d(loss)/d(logits) in closed form."""
    coeffs = objective_logp_grad(group, cfg)
    return -policy.accumulate_grad(group.responses, coeffs)


def loss_at(policy: ToyPlanPolicy, group: GrpoGroup, cfg: GrpoConfig, logits: np.ndarray) -> float:
    new = [policy.log_prob(s.prompt, s.actions, logits) for s in group.responses]
    probe = GrpoGroup(group.responses, group.rewards, group.advantages, group.logp_old, new, group.logp_ref)
    return grpo_objective(probe, cfg)[0]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """Max over entries of |a - b| / max(|a|, |b|, floor).

    The floor keeps entries whose true value is ~0 from dividing round-off by
    round-off.
    """
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def numeric_gradient(policy: ToyPlanPolicy, group: GrpoGroup, cfg: GrpoConfig, h: float = 1e-5) -> np.ndarray:
    base = policy.logits
    grad = np.zeros_like(base)
    for idx in itertools.product(*(range(n) for n in base.shape)):
        probe = base.copy()
        probe[idx] += h
        up = loss_at(policy, group, cfg, probe)
        probe[idx] -= 2 * h
        down = loss_at(policy, group, cfg, probe)
        grad[idx] = (up - down) / (2 * h)
    return grad


def gradient_check(policy: ToyPlanPolicy, group: GrpoGroup, cfg: GrpoConfig, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return relative_error(analytic_gradient(policy, group, cfg), numeric_gradient(policy, group, cfg, h))


# -- vocabularies --------------------------------------------------------------


def build_vocabulary(grammar: SkillGrammar, objects: Sequence[str], locations: Sequence[str]) -> list[PlanStep]:
    pools = {"object": list(objects), "location": list(locations)}
    steps = []
    for template in grammar:
        for args in itertools.product(*(pools[s] for s in template.slots)):
            steps.append(PlanStep(template, tuple(args)))
    return steps


def task_vocabulary(
    plans: Sequence[Plan],
    grammar: SkillGrammar,
    size: int,
    seed: int = 0,
    ontology: Ontology | None = None,
    weights: RewardWeights = DEFAULT_WEIGHTS,
) -> list[PlanStep]:
    """Ground-truth steps of every task plus seeded distractors up to ``size``.

    Distractors come from the grammar crossed with the arguments that appear in
    the tasks. A candidate the reward cannot tell apart from a required step
    (similarity 1) is never used as a distractor.
    """
    required: list[PlanStep] = []
    for plan in plans:
        for step in plan:
            if step not in required:
                required.append(step)
    if len(required) > size:
        raise ValueError(f"tasks need {len(required)} distinct steps, more than vocabulary size {size}")
    objects = sorted({s.slot_args["object"] for s in required if "object" in s.slot_args})
    locations = sorted({s.slot_args["location"] for s in required if "location" in s.slot_args})
    pool = [
        s
        for s in build_vocabulary(grammar, objects or ["object"], locations or ["location"])
        if all(step_similarity(s, r, ontology, weights) < 1.0 for r in required)
    ]
    rng = np.random.default_rng(seed)
    extra = [pool[i] for i in rng.permutation(len(pool))[: size - len(required)]]
    return required + extra


# -- training ----------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    task: int
    mean_reward: float
    mean_abs_advantage: float
    kl: float
    clip_fraction: float


@dataclass
class TrainReport:
    records: list[StepRecord]
    initial_mean_reward: float
    final_mean_reward: float
    greedy_plans: list[str]
    greedy_rewards: list[float]
    greedy_exact: list[bool]
    max_total: float

    @property
    def exact_count(self) -> int:
        return sum(self.greedy_exact)

    def summary(self) -> dict:
        return {
            "steps": len(self.records),
            "initial_mean_reward": self.initial_mean_reward,
            "final_mean_reward": self.final_mean_reward,
            "max_total": self.max_total,
            "greedy_exact": self.exact_count,
            "tasks": len(self.greedy_exact),
            "greedy_plans": self.greedy_plans,
            "greedy_rewards": self.greedy_rewards,
        }

    def jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)


def same_steps(a: Plan, b: Plan) -> bool:
    """Plans agree as multisets of steps (the reward ignores order)."""
    key = lambda s: (s.template.surface_pattern, s.args)  # noqa: E731
    return sorted(map(key, a)) == sorted(map(key, b))


def evaluate_policy(
    policy: ToyPlanPolicy,
    reward: Callable[[int, Sample], float],
    prompts: int,
    group_size: int,
    rng: np.random.Generator,
) -> float:
    """Mean reward of one freshly sampled group per prompt."""
    values = [reward(t, policy.sample(rng, t)) for t in range(prompts) for _ in range(group_size)]
    return float(np.mean(values))


def train_toy(
    tasks: Sequence[tuple[str, Plan]],
    cfg: GrpoConfig,
    grammar: SkillGrammar,
    ontology: Ontology | None = None,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    vocabulary: Sequence[PlanStep] | None = None,
    horizon: int | None = None,
    policy: ToyPlanPolicy | None = None,
) -> tuple[TrainReport, ToyPlanPolicy]:
    """Optimize a tabular plan policy with GRPO, one task per step round-robin."""
    if not tasks:
        raise ValueError("need at least one task")
    plans = [plan for _, plan in tasks]
    if policy is None:
        if vocabulary is None:
            vocabulary = task_vocabulary(
                plans, grammar, size=max(40, sum(len(p) for p in plans)), seed=cfg.seed, ontology=ontology, weights=weights
            )
        if horizon is None:
            horizon = max(len(p) for p in plans)
        policy = ToyPlanPolicy.uniform(vocabulary, len(tasks), horizon)
    rng = np.random.default_rng(cfg.seed)
    eval_rng = np.random.default_rng([cfg.seed, 1])
    cache: dict[tuple[int, tuple[int, ...]], float] = {}

    def reward(task: int, sample: Sample) -> float:
        key = (task, sample.actions)
        if key not in cache:
            cache[key] = total_reward(sample.text, plans[task], grammar, ontology, weights).total
        return cache[key]

    initial = evaluate_policy(policy, reward, len(tasks), cfg.group_size, eval_rng)
    records = []
    for step in range(cfg.steps):
        task = step % len(tasks)
        samples = [policy.sample(rng, task) for _ in range(cfg.group_size)]
        rewards = [reward(task, s) for s in samples]
        logp_old = [s.logp for s in samples]
        logp_ref = [policy.ref_log_prob(task, s.actions) for s in samples]
        kls, clips = [], []
        for _ in range(cfg.inner_epochs):
            group = build_group(policy, samples, rewards, logp_old, logp_ref)
            _, diag = grpo_objective(group, cfg)
            kls.append(diag["kl"])
            clips.append(diag["clip_fraction"])
            policy.logits -= cfg.learning_rate * analytic_gradient(policy, group, cfg)
        records.append(
            StepRecord(
                step=step,
                task=task,
                mean_reward=float(np.mean(rewards)),
                mean_abs_advantage=float(np.mean(np.abs(group.advantages))),
                kl=float(np.mean(kls)),
                clip_fraction=float(np.mean(clips)),
            )
        )
        if cfg.ref_refresh_every and (step + 1) % cfg.ref_refresh_every == 0:
            policy.refresh_reference()

    final = evaluate_policy(policy, reward, len(tasks), cfg.group_size, eval_rng)
    greedy_plans, greedy_rewards, greedy_exact = [], [], []
    for t, truth in enumerate(plans):
        actions = policy.greedy(t)
        plan = policy.plan(actions)
        greedy_plans.append(plan.render())
        greedy_rewards.append(total_reward(policy.render(actions), truth, grammar, ontology, weights).total)
        greedy_exact.append(same_steps(plan, truth))
    report = TrainReport(
        records=records,
        initial_mean_reward=initial,
        final_mean_reward=final,
        greedy_plans=greedy_plans,
        greedy_rewards=greedy_rewards,
        greedy_exact=greedy_exact,
        max_total=weights.max_total,
    )
    return report, policy
