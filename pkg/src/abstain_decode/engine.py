"""Greedy decoding strategies, including contrastive decoding with abstention.

Every strategy runs the same greedy loop; they differ in which templates are
queried per step and how the resulting logits are combined. CDA queries five
prompts per step (parametric, contextual, abstention and the two null
prompts), turns entropy reductions against the null prompts into source
weights and mixes the three knowledge logits with them.
"""

from __future__ import annotations

import enum
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dist
from .backend import DEFAULT_MAX_TOKENS, Backend, SerializedBackend
from .dist import StepWeights
from .errors import AbstainDecodeError, BackendStepError, InvalidArgumentError
from .judge import ABSTENTION_TEXT, DEFAULT_JUDGE, EvalInstance, Judge
from .metrics import EntropyVariant, aggregate_entropy
from .prompts import Demo, PromptKit, RenderedPrompt, TemplateKind

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.7
DEFAULT_CAD_W = 1.0


class Strategy(enum.Enum):
    CONTEXT = "context"
    ABSTAIN = "abstain"
    SELF_ASK = "self-ask"
    CAD = "cad"
    ACD = "acd"
    ACDA = "acd-a"
    ENTROPY = "entropy"
    FSB = "fsb"
    CDA = "cda"
    CDAM = "cda-m"


class CalibrationForm(enum.Enum):
    REDUCTION = "reduction"
    AS_PRINTED = "as-printed"


@dataclass(frozen=True)
class StrategyConfig:
    strategy: Strategy
    alpha: float = DEFAULT_ALPHA
    cad_w: float = DEFAULT_CAD_W
    entropy_variant: EntropyVariant = EntropyVariant.FIRST_TOKEN
    entropy_threshold: float = math.inf
    calibration: CalibrationForm = CalibrationForm.REDUCTION
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise InvalidArgumentError(f"max_tokens must be at least 1, got {self.max_tokens}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidArgumentError(f"alpha must lie in [0, 1], got {self.alpha}")
        if math.isnan(self.entropy_threshold):
            raise InvalidArgumentError("entropy_threshold is NaN")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "alpha": self.alpha,
            "cad_w": self.cad_w,
            "entropy_variant": self.entropy_variant.value,
            "entropy_threshold": self.entropy_threshold,
            "calibration": self.calibration.value,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class StepTrace:
    step: int
    token: int
    weights: StepWeights
    h_p: float | None = None
    h_c: float | None = None
    h_a: float | None = None
    h_null_p: float | None = None
    h_null_c: float | None = None
    r_p: float | None = None
    r_c: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights.as_tuple())
        return d


@dataclass
class Prediction:
    text: str
    abstained: bool
    trace: list[StepTrace]
    inference_calls: int
    original_text: str | None = None
    tokens: list[int] = field(default_factory=list)


# --- weight computation ---------------------------------------------------


def relevance(h: float, h_null: float, form: CalibrationForm = CalibrationForm.REDUCTION) -> float:
    """Calibrated relevance of a source from its entropy and its null-prompt entropy.

    Reduction form scores how far the prompt lowers entropy below the null
    prompt; the as-printed form scores how far it raises it. Both are clipped
    to [0, 1]. A null entropy of zero leaves no headroom and yields 0.
    """
    if h_null <= 0:
        log.debug("null-prompt entropy %r is degenerate; relevance set to 0", h_null)
        return 0.0
    gain = h_null - h if form is CalibrationForm.REDUCTION else h - h_null
    return min(max(gain, 0.0) / h_null, 1.0)


def normalize_weights(r_p: float, r_c: float) -> StepWeights:
    total = r_p + r_c
    if total == 0:
        return StepWeights(0.0, 0.0, 1.0)
    w_p = r_p / total * r_p
    w_c = r_c / total * r_c
    return StepWeights(w_p, w_c, 1.0 - w_p - w_c)


def momentum_update(prev: StepWeights, cur: StepWeights, alpha: float) -> StepWeights:
    b = 1.0 - alpha
    return StepWeights(
        alpha * prev.w_p + b * cur.w_p,
        alpha * prev.w_c + b * cur.w_c,
        alpha * prev.w_a + b * cur.w_a,
    )


# --- decoding ---------------------------------------------------------------

WeightOverride = Callable[[float, float, float], StepWeights]

_VERDICT_UNKNOWN = re.compile(r"\bunknown\b")
_FSB_ORDER = (TemplateKind.CONTEXTUAL, TemplateKind.ABSTENTION, TemplateKind.PARAMETRIC)


class _Session:
    """Per-instance call counter and prompt cache."""

    def __init__(self, backend: Backend, instance: EvalInstance, kit: PromptKit, demos: Sequence[Demo]):
        self.backend = backend
        self.instance = instance
        self.kit = kit
        self.demos = demos
        self.calls = 0
        self.step = 0
        self._prompts: dict[TemplateKind, RenderedPrompt] = {}

    def prompt(self, kind: TemplateKind) -> RenderedPrompt:
        if kind not in self._prompts:
            inst = self.instance
            self._prompts[kind] = self.kit.render(
                kind, context=inst.context, question=inst.question, demos=self.demos
            )
        return self._prompts[kind]

    def logits(self, prompt: RenderedPrompt) -> np.ndarray:
        self.calls += 1
        try:
            return dist.as_logits(self.backend.logits(prompt))
        except AbstainDecodeError as exc:
            if isinstance(exc, BackendStepError):
                raise
            raise BackendStepError(self.step, exc) from exc

    def query(self, kind: TemplateKind, prefix: str) -> np.ndarray:
        return self.logits(self.prompt(kind).extend(prefix))


def _argmax(logits: np.ndarray) -> int:
    return int(np.argmax(logits))


def _one_hot_weights(kind: TemplateKind) -> StepWeights:
    return {
        TemplateKind.PARAMETRIC: StepWeights(1.0, 0.0, 0.0),
        TemplateKind.CONTEXTUAL: StepWeights(0.0, 1.0, 0.0),
        TemplateKind.ABSTENTION: StepWeights(0.0, 0.0, 1.0),
    }[kind]


def _cda_step(
    session: _Session,
    prefix: str,
    config: StrategyConfig,
    prev_weights: StepWeights | None,
    weight_override: WeightOverride | None,
) -> tuple[int, StepTrace]:
    d_p = session.query(TemplateKind.PARAMETRIC, prefix)
    d_c = session.query(TemplateKind.CONTEXTUAL, prefix)
    d_a = session.query(TemplateKind.ABSTENTION, prefix)
    null_p = session.query(TemplateKind.NULL_PARAMETRIC, prefix)
    null_c = session.query(TemplateKind.NULL_CONTEXTUAL, prefix)
    h_p, h_c, h_a = (dist.logit_entropy(d) for d in (d_p, d_c, d_a))
    h_null_p, h_null_c = dist.logit_entropy(null_p), dist.logit_entropy(null_c)
    r_p = relevance(h_p, h_null_p, config.calibration)
    r_c = relevance(h_c, h_null_c, config.calibration)
    if weight_override is not None:
        weights = weight_override(h_p, h_c, h_a)
    else:
        weights = normalize_weights(r_p, r_c)
    if config.strategy is Strategy.CDAM and prev_weights is not None:
        weights = momentum_update(prev_weights, weights, config.alpha)
    token = _argmax(dist.mix_three(weights, d_p, d_c, d_a))
    trace = StepTrace(session.step, token, weights, h_p, h_c, h_a, h_null_p, h_null_c, r_p, r_c)
    return token, trace


def cda_step(
    instance: EvalInstance,
    generated_prefix: str,
    config: StrategyConfig,
    prev_weights: StepWeights | None,
    backend: Backend,
    *,
    kit: PromptKit | None = None,
    demos: Sequence[Demo] = (),
    weight_override: WeightOverride | None = None,
) -> tuple[int, StepTrace]:
    """One CDA / CDA-m step for ``instance`` after ``generated_prefix``."""
    if config.strategy not in (Strategy.CDA, Strategy.CDAM):
        raise InvalidArgumentError(f"cda_step does not run {config.strategy.value}")
    session = _Session(backend, instance, kit or PromptKit(), demos)
    session.step = 1
    return _cda_step(session, generated_prefix, config, prev_weights, weight_override)


class Decoder:
    """Runs a strategy over instances against one backend."""

    def __init__(
        self,
        backend: Backend,
        config: StrategyConfig,
        kit: PromptKit | None = None,
        demos: Sequence[Demo] = (),
        judge: Judge = DEFAULT_JUDGE,
        weight_override: WeightOverride | None = None,
    ):
        self.backend = backend
        self.config = config
        self.kit = kit or PromptKit()
        self.demos = tuple(demos)
        self.judge = judge
        self.weight_override = weight_override

    def _loop(self, session: _Session, step_fn) -> tuple[list[int], list[StepTrace]]:
        tokens: list[int] = []
        traces: list[StepTrace] = []
        prefix = ""
        for step in range(1, self.config.max_tokens + 1):
            session.step = step
            token, trace = step_fn(prefix, step)
            traces.append(trace)
            if token == self.backend.eos_id:
                break
            tokens.append(token)
            prefix = self.backend.detokenize(tokens)
        return tokens, traces

    def _single(self, session: _Session, kind: TemplateKind):
        weights = _one_hot_weights(kind)

        def step(prefix: str, i: int) -> tuple[int, StepTrace]:
            d = session.query(kind, prefix)
            h = dist.logit_entropy(d)
            slot = {TemplateKind.PARAMETRIC: "h_p", TemplateKind.CONTEXTUAL: "h_c", TemplateKind.ABSTENTION: "h_a"}[kind]
            token = _argmax(d)
            return token, StepTrace(i, token, weights, **{slot: h})

        return step

    def decode(self, instance: EvalInstance) -> Prediction:
        cfg = self.config
        s = cfg.strategy
        session = _Session(self.backend, instance, self.kit, self.demos)

        if s in (Strategy.CONTEXT, Strategy.ENTROPY, Strategy.SELF_ASK):
            step_fn = self._single(session, TemplateKind.CONTEXTUAL)
        elif s is Strategy.ABSTAIN:
            step_fn = self._single(session, TemplateKind.ABSTENTION)
        elif s is Strategy.CAD:
            step_fn = self._cad(session)
        elif s is Strategy.ACD:
            step_fn = self._acd(session)
        elif s is Strategy.ACDA:
            step_fn = self._acda(session)
        elif s is Strategy.FSB:
            step_fn = self._fsb(session)
        else:
            step_fn = self._cda(session)

        tokens, traces = self._loop(session, step_fn)
        text = self.backend.detokenize(tokens)

        if s is Strategy.ENTROPY:
            return self._entropy_verdict(text, tokens, traces, session)
        if s is Strategy.SELF_ASK:
            return self._self_ask_verdict(text, tokens, traces, session)
        return Prediction(text, self.judge.is_abstention(text), traces, session.calls, tokens=tokens)

    # strategy step functions

    def _cad(self, session: _Session):
        w = self.config.cad_w
        weights = StepWeights(-w, 1.0 + w, 0.0)

        def step(prefix: str, i: int):
            d_p = session.query(TemplateKind.PARAMETRIC, prefix)
            d_c = session.query(TemplateKind.CONTEXTUAL, prefix)
            token = _argmax(dist.cad_mix(d_p, d_c, w))
            return token, StepTrace(i, token, weights, h_p=dist.logit_entropy(d_p), h_c=dist.logit_entropy(d_c))

        return step

    def _acd(self, session: _Session):
        def step(prefix: str, i: int):
            d_p = session.query(TemplateKind.PARAMETRIC, prefix)
            d_c = session.query(TemplateKind.CONTEXTUAL, prefix)
            h_p, h_c = dist.logit_entropy(d_p), dist.logit_entropy(d_c)
            w = dist.acd_weight(h_p, h_c)
            token = _argmax(dist.contrast(d_p, d_c, w))
            return token, StepTrace(i, token, StepWeights(1.0 - w, w, 0.0), h_p=h_p, h_c=h_c)

        return step

    def _acda(self, session: _Session):
        def step(prefix: str, i: int):
            d_p = session.query(TemplateKind.PARAMETRIC, prefix)
            d_c = session.query(TemplateKind.CONTEXTUAL, prefix)
            d_a = session.query(TemplateKind.ABSTENTION, prefix)
            h_p, h_c, h_a = (dist.logit_entropy(d) for d in (d_p, d_c, d_a))
            weights = dist.acda_weights(h_p, h_c, h_a)
            token = _argmax(dist.mix_three(weights, d_p, d_c, d_a))
            return token, StepTrace(i, token, weights, h_p=h_p, h_c=h_c, h_a=h_a)

        return step

    def _fsb(self, session: _Session):
        chosen: list[TemplateKind] = []

        def step(prefix: str, i: int):
            if not chosen:
                first = {k: session.query(k, prefix) for k in _FSB_ORDER}
                ent = {k: dist.logit_entropy(d) for k, d in first.items()}
                kind = min(_FSB_ORDER, key=lambda k: (ent[k], _FSB_ORDER.index(k)))
                chosen.append(kind)
                token = _argmax(first[kind])
                trace = StepTrace(
                    i, token, _one_hot_weights(kind),
                    h_p=ent[TemplateKind.PARAMETRIC], h_c=ent[TemplateKind.CONTEXTUAL], h_a=ent[TemplateKind.ABSTENTION],
                )
                return token, trace
            return self._single(session, chosen[0])(prefix, i)

        return step

    def _cda(self, session: _Session):
        prev: list[StepWeights] = []

        def step(prefix: str, i: int):
            token, trace = _cda_step(session, prefix, self.config, prev[-1] if prev else None, self.weight_override)
            prev.append(trace.weights)
            return token, trace

        return step

    # post-hoc abstention baselines

    def _entropy_verdict(self, text, tokens, traces, session) -> Prediction:
        agg = aggregate_entropy(answer_entropies(traces, self.backend.eos_id), self.config.entropy_variant)
        if agg > self.config.entropy_threshold:
            return Prediction(ABSTENTION_TEXT, True, traces, session.calls, original_text=text, tokens=tokens)
        return Prediction(text, self.judge.is_abstention(text), traces, session.calls, tokens=tokens)

    def _self_ask_verdict(self, text, tokens, traces, session) -> Prediction:
        inst = session.instance
        verify = self.kit.render(
            TemplateKind.VERIFICATION, context=inst.context, question=inst.question, candidate_answer=text.strip()
        )
        verdict: list[int] = []
        for step in range(1, self.config.max_tokens + 1):
            session.step = len(traces) + step
            token = _argmax(session.logits(verify.extend(self.backend.detokenize(verdict))))
            if token == self.backend.eos_id:
                break
            verdict.append(token)
        if _VERDICT_UNKNOWN.search(self.backend.detokenize(verdict).lower()):
            return Prediction(ABSTENTION_TEXT, True, traces, session.calls, original_text=text, tokens=tokens)
        return Prediction(text, self.judge.is_abstention(text), traces, session.calls, tokens=tokens)

    def decode_all(self, instances: Sequence[EvalInstance], jobs: int = 1) -> list[Prediction]:
        """Decode many instances, in parallel when the backend allows it.

        A backend that is not concurrent-safe is wrapped so that its calls
        never overlap, whatever ``jobs`` is.
        """
        if jobs <= 1:
            return [self.decode(inst) for inst in instances]
        worker = self
        if not self.backend.capabilities.concurrent_safe:
            worker = Decoder(
                SerializedBackend(self.backend), self.config, self.kit, self.demos, self.judge, self.weight_override
            )
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(worker.decode, instances))


def answer_entropies(traces: Sequence[StepTrace], eos_id: int) -> list[float]:
    """Contextual entropies of the answer tokens (the closing eos step is
    dropped unless it is the only step)."""
    steps = list(traces)
    if len(steps) > 1 and steps[-1].token == eos_id:
        steps = steps[:-1]
    return [t.h_c for t in steps if t.h_c is not None]


def decode(
    instance: EvalInstance,
    config: StrategyConfig,
    backend: Backend,
    *,
    kit: PromptKit | None = None,
    demos: Sequence[Demo] = (),
    judge: Judge = DEFAULT_JUDGE,
    weight_override: WeightOverride | None = None,
) -> Prediction:
    return Decoder(backend, config, kit, demos, judge, weight_override).decode(instance)
