"""Measurement kit: transcript/token error rates, turn-taking confusion
metrics over the [0, 2*mu] detection window, IRQ-trace statistics, and
the report generators (TTS table, interactive table, ablation matrix).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import vocab
from .model import DuplexModel
from .session import SamplerConfig, run_offline, trace_export
from .tensor import ContractError
from .world import Codebook, SampleRecord


# -- edit distance ------------------------------------------------------------


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[len(b)]


def token_error_rate(hyp: Sequence[int], ref: Sequence[int]) -> float:
    """Edit distance normalized by max(1, |ref|); terminal tokens must be
    stripped by the caller."""
    return edit_distance(hyp, ref) / max(1, len(ref))


def strip_terminals(tokens: Sequence[int]) -> list[int]:
    return [t for t in tokens if t < vocab.N_AUDIO]


def transcript_error_rate(
    hyp_tokens: Sequence[int], ref_context: str, codebook: Codebook
) -> tuple[float, str]:
    """Decode tokens via the codebook, then character edit distance
    against the source context, normalized by its length."""
    text, _ = codebook.decode(strip_terminals(hyp_tokens))
    return edit_distance(text, ref_context) / max(1, len(ref_context)), text


# -- confusion ----------------------------------------------------------------


@dataclass
class ConfusionCounts:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    def add(self, outcome: str):
        setattr(self, outcome, getattr(self, outcome) + 1)

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


def classify_outcome(
    interrupted: bool,
    onset: Optional[int],
    stop: Optional[dict],
    window: int = 8,
) -> str:
    """TP: interrupted and an IRQ stop inside the closed [onset, onset+window]
    interval. FN: interrupted otherwise (no stop, late, or premature).
    FP: not interrupted but an IRQ stop. TN: not interrupted, EOS/MaxLen."""
    if interrupted and onset is None:
        raise ContractError("interrupted item without onset")
    if not interrupted and onset is not None:
        raise ContractError("onset supplied for a non-interrupted item")
    irq_stop = stop is not None and stop["reason"] == "irq"
    if interrupted:
        if irq_stop and onset <= stop["step"] <= onset + window:
            return "tp"
        return "fn"
    return "fp" if irq_stop else "tn"


def aggregate(counts: ConfusionCounts) -> dict:
    """Precision/Recall/F1 with zero denominators flagged and reported as 0."""
    flags = []
    if counts.tp + counts.fp == 0:
        precision = 0.0
        flags.append("precision_undefined")
    else:
        precision = counts.tp / (counts.tp + counts.fp)
    if counts.tp + counts.fn == 0:
        recall = 0.0
        flags.append("recall_undefined")
    else:
        recall = counts.tp / (counts.tp + counts.fn)
    if precision + recall == 0:
        f1 = 0.0
        flags.append("f1_undefined")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1, "flags": flags}


# -- tts evaluation -----------------------------------------------------------


@dataclass
class TtsEvalReport:
    token_error_rate: float
    transcript_error_rate: float
    n_utterances: int
    details: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "token_error_rate": self.token_error_rate,
            "transcript_error_rate": self.transcript_error_rate,
            "n_utterances": self.n_utterances,
            "details": self.details,
        }


def run_tts_eval(
    model: DuplexModel,
    testset: Sequence[SampleRecord],
    codebook: Codebook,
    sampler: SamplerConfig,
    vanilla: bool = False,
) -> TtsEvalReport:
    """TER over non-interrupted utterances. LSLM mode runs lockstep with
    all-SIL listening; vanilla mode skips the listening pathway.

    Aggregates are length-weighted (total edits / total reference length),
    the conventional corpus computation.
    """
    details = []
    tok_edits = tok_len = char_edits = char_len = 0
    for i, rec in enumerate(testset):
        stream = [vocab.SIL] * (3 * len(rec.context) + 16)
        result = run_offline(
            model,
            rec.context,
            stream,
            SamplerConfig(
                top_p=sampler.top_p,
                temperature=sampler.temperature,
                seed=sampler.seed + i,
                greedy=sampler.greedy,
            ),
            vanilla=vanilla,
        )
        hyp = strip_terminals(result["tokens"])
        ter, text = transcript_error_rate(result["tokens"], rec.context, codebook)
        t_ed = edit_distance(hyp, rec.speak_target)
        c_ed = edit_distance(text, rec.context)
        tok_edits += t_ed
        tok_len += len(rec.speak_target)
        char_edits += c_ed
        char_len += len(rec.context)
        details.append(
            {
                "context": rec.context,
                "decoded": text,
                "token_error_rate": t_ed / max(1, len(rec.speak_target)),
                "transcript_error_rate": ter,
                "stop": result["stop"],
            }
        )
    return TtsEvalReport(
        token_error_rate=tok_edits / max(1, tok_len),
        transcript_error_rate=char_edits / max(1, char_len),
        n_utterances=len(testset),
        details=details,
    )


# -- interactive evaluation ---------------------------------------------------


def run_interactive_eval(
    model: DuplexModel,
    testset: Sequence[SampleRecord],
    sampler: SamplerConfig,
    window: int = 8,
) -> dict:
    """Confusion counts + P/R/F1 over a paired interrupted/non-interrupted
    test split (clean or noise variant chosen by the caller via testset)."""
    counts = ConfusionCounts()
    traces = []
    premature = 0
    for i, rec in enumerate(testset):
        result = run_offline(
            model,
            rec.context,
            rec.listen,
            SamplerConfig(
                top_p=sampler.top_p,
                temperature=sampler.temperature,
                seed=sampler.seed + i,
                greedy=sampler.greedy,
            ),
        )
        outcome = classify_outcome(
            rec.interrupted, rec.onset, result["stop"], window=window
        )
        if (
            rec.interrupted
            and result["stop"]["reason"] == "irq"
            and result["stop"]["step"] < rec.onset
        ):
            premature += 1
        counts.add(outcome)
        traces.append(trace_export(result, onset=rec.onset))
    metrics = aggregate(counts)
    return {
        "counts": {
            "tp": counts.tp,
            "fn": counts.fn,
            "fp": counts.fp,
            "tn": counts.tn,
        },
        "premature_irq_stops": premature,
        **metrics,
        "traces": traces,
    }


# -- irq trace statistics -----------------------------------------------------


@dataclass
class IrqTraceStats:
    n_items: int
    rise_ratios: list[float]
    frac_ratio_ge_10: float
    median_curve: list[float]        # median P(IRQ) at offsets 0..window from onset
    steps_to_stop: list[Optional[int]]

    def to_dict(self) -> dict:
        return {
            "n_items": self.n_items,
            "frac_ratio_ge_10": self.frac_ratio_ge_10,
            "median_rise_ratio": float(np.median(self.rise_ratios))
            if self.rise_ratios
            else None,
            "median_curve": self.median_curve,
        }


def irq_trace_stats(traces: Sequence[dict], window: int = 8) -> IrqTraceStats:
    """Per-item rise ratio = max post-onset P(IRQ) over max(median
    pre-onset P(IRQ), 1e-9); aggregate median curve aligned at onset."""
    ratios = []
    steps_to_stop = []
    curves = []
    for tr in traces:
        onset = tr["onset"]
        if onset is None:
            continue
        probs = [p["probability"] for p in tr["irq_trace"]]
        # step t (1-based) consumes frames 0..t-1: the first step that can
        # see the onset frame is step onset+1 (index onset in the trace)
        pre = probs[:onset]
        post = probs[onset:]
        if not post:
            continue
        baseline = max(float(np.median(pre)) if pre else 1e-9, 1e-9)
        ratios.append(max(post) / baseline)
        stop = tr["stop"]
        steps_to_stop.append(
            stop["step"] - onset if stop["reason"] == "irq" else None
        )
        curve = [
            post[k] if k < len(post) else float("nan") for k in range(window + 1)
        ]
        curves.append(curve)
    median_curve = []
    if curves:
        arr = np.asarray(curves, dtype=float)
        median_curve = [
            float(np.nanmedian(arr[:, k])) if not np.all(np.isnan(arr[:, k])) else 0.0
            for k in range(arr.shape[1])
        ]
    frac = (
        sum(r >= 10 for r in ratios) / len(ratios) if ratios else 0.0
    )
    return IrqTraceStats(
        n_items=len(ratios),
        rise_ratios=ratios,
        frac_ratio_ge_10=frac,
        median_curve=median_curve,
        steps_to_stop=steps_to_stop,
    )


# -- reports ------------------------------------------------------------------

ABLATION_ROWS = [
    ("vanilla", None, None),
    ("lslm", "scratch", "frozen"),
    ("lslm", "scratch", "finetune"),
    ("lslm", "frozen", "frozen"),
    ("lslm", "frozen", "finetune"),
    ("lslm", "finetune", "frozen"),
    ("lslm", "finetune", "finetune"),
]


def ablation_report(rows: Sequence[dict]) -> dict:
    """rows: per-row dicts with keys model, speaking, listening,
    transcript_error_rate, precision, recall, f1 (interactive keys absent
    or None for vanilla / missing checkpoints)."""
    report = {"rows": list(rows)}
    report["text"] = render_ablation_text(rows)
    return report


def render_ablation_text(rows: Sequence[dict]) -> str:
    header = f"{'model':<10}{'speaking':<10}{'listening':<10}{'TER%':>8}{'P%':>8}{'R%':>8}{'F1%':>8}"
    lines = [header, "-" * len(header)]

    def fmt(v):
        return f"{100 * v:8.2f}" if v is not None else f"{'-':>8}"

    for r in rows:
        lines.append(
            f"{r['model']:<10}"
            f"{(r.get('speaking') or '-'):<10}"
            f"{(r.get('listening') or '-'):<10}"
            f"{fmt(r.get('transcript_error_rate'))}"
            f"{fmt(r.get('precision'))}"
            f"{fmt(r.get('recall'))}"
            f"{fmt(r.get('f1'))}"
        )
    return "\n".join(lines)


def write_json(path, payload: dict):
    from pathlib import Path

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
