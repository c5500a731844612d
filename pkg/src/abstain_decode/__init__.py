"""Contrastive decoding with abstention over token-level language models."""

from .dist import StepWeights, acd_weight, acda_weights, cad_mix, entropy, mix_three, softmax
from .engine import (
    CalibrationForm,
    Decoder,
    Prediction,
    StepTrace,
    Strategy,
    StrategyConfig,
    cda_step,
    decode,
    momentum_update,
    normalize_weights,
    relevance,
)
from .judge import EvalInstance, Judge, OutcomeBucket, classify_outcome, is_abstention, is_correct
from .metrics import ConfusionCounts, MetricsReport, count_confusion, f1_abs, f1_ans, reliability_score
from .prompts import PromptKit, RenderedPrompt, TemplateKind, render
from .testbed import QARecord, TestbedConfig, TestbedRecord, build_testbed, expand_eval

__version__ = "0.1.0"
