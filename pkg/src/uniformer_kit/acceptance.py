"""Acceptance criteria as named, self-timed checks (used by ``reproduce`` and the tests)."""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional

import numpy as np

from .analyzer import count_macs, count_params
from .checkpoint import decode, encode, model_state
from .checks import run_equivalence_suite, run_gradient_suite
from .config import PRESETS, build_hybrid_stage3, preset, tiny_config
from .model import build_model
from .train import SyntheticTask, TrainConfig, train


@dataclass
class Outcome:
    passed: bool
    measured: str
    target: str


@dataclass(frozen=True)
class Criterion:
    name: str
    fn: Callable[[], Outcome]
    time_limit: float
    # analysis of why a faithful implementation cannot meet the target
    known_failure: Optional[str] = None


@dataclass
class Result:
    name: str
    passed: bool
    measured: str
    target: str
    seconds: float
    known_failure: Optional[str] = None

    @property
    def status(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def line(self) -> str:
        note = "  [known: see notes]" if self.known_failure and not self.passed else ""
        return f"{self.status}  {self.name:<34} measured {self.measured:<28} target {self.target} ({self.seconds:.1f}s){note}"


def _within(value: float, target: float, rel: float) -> bool:
    return abs(value - target) <= rel * target


# ---------------------------------------------------------------------------
# cost-model criteria

PARAM_TARGETS = {"S": 21.5e6, "B": 50.3e6, "L": 100e6, "XXS": 10.2e6, "XS": 16.5e6}
FLOP_TARGETS = {"S": 3.6e9, "B": 8.3e9, "L": 12.6e9}
L_FLOPS_NOTE = ("Stage-3 linear layers of the listed L widths/depths alone cost ~11.3G at 224^2; "
                "the analyzer reports 19.7G")


def _params_check(name: str) -> Callable[[], Outcome]:
    def fn():
        n = count_params(preset(name))
        t = PARAM_TARGETS[name]
        return Outcome(_within(n, t, 0.02), f"{n / 1e6:.3f}M", f"{t / 1e6:.1f}M +-2%")
    return fn


def _flops_check(name: str) -> Callable[[], Outcome]:
    def fn():
        m = count_macs(preset(name), (3, 1, 224, 224)).total_macs
        t = FLOP_TARGETS[name]
        return Outcome(_within(m, t, 0.05), f"{m / 1e9:.3f}G", f"{t / 1e9:.1f}G +-5%")
    return fn


def _video_flops() -> Outcome:
    m = count_macs(preset("S", input_spec=(3, 16, 224, 224))).total_macs
    return Outcome(_within(m, 41.8e9, 0.05), f"{m / 1e9:.2f}G", "41.8G +-5%")


def _xxs_macs(res: int, ratio: float) -> int:
    return count_macs(preset("XXS", shrink_ratio=ratio), (3, 1, res, res)).total_macs


def _light_check(res: int, ratio: float, target: float) -> Callable[[], Outcome]:
    def fn():
        m = _xxs_macs(res, ratio)
        return Outcome(_within(m, target, 0.05), f"{m / 1e9:.3f}G", f"{target / 1e9:.2f}G +-5%")
    return fn


def _shrink_saving() -> Outcome:
    saving = 1.0 - _xxs_macs(160, 0.5) / _xxs_macs(160, 1.0)
    return Outcome(abs(saving - 0.26) <= 0.03, f"{100 * saving:.1f}%", "26% +-3pp")


def _stage3_share() -> Outcome:
    rep = count_macs(preset("S"), (3, 1, 1008, 1008))
    share = rep.matmul_macs(stage=3) / rep.total_macs
    return Outcome(share > 0.5, f"{100 * share:.1f}% of total", "> 50%")


def _global_scaling() -> Outcome:
    a, b = (count_macs(preset("S"), (3, 1, r, r)).matmul_macs(stage=3, block_type="G") for r in (1008, 2016))
    return Outcome(b == 16 * a, f"x{b / a:g} ({b}/{a})", "x16 exactly")


def _window_scaling() -> Outcome:
    base = preset("S")
    cfg = replace(base, stages=base.stages[:2] + (build_hybrid_stage3(base.stages[2], (14, 14)),) + base.stages[3:])
    a, b = (count_macs(cfg, (3, 1, r, r)).matmul_macs(stage=3, block_type="W") for r in (896, 1792))
    return Outcome(b == 4 * a, f"x{b / a:g} ({b}/{a})", "x4 exactly")


# ---------------------------------------------------------------------------
# suites


def _suite(results) -> Outcome:
    failed = [r.name for r in results if not r.passed]
    worst = max((r.value for r in results), default=0.0)
    measured = f"{len(results) - len(failed)}/{len(results)} ok, worst {worst:.1e}"
    if failed:
        measured += f"; failing {', '.join(failed[:3])}"
    return Outcome(not failed, measured, "all pass")


def _equivalence() -> Outcome:
    return _suite(run_equivalence_suite())


def _gradients() -> Outcome:
    return _suite(run_gradient_suite(seed=0, tol=1e-4))


_TRACES: Dict[str, list] = {}


def _train_tiny(types: str, steps: int = 500, seed: int = 0):
    model = build_model(tiny_config(types), seed=seed)
    return train(model, SyntheticTask(seed=seed), TrainConfig(steps=steps, seed=seed))


def _trainability(types: str, threshold: float) -> Callable[[], Outcome]:
    def fn():
        trace = _train_tiny(types)
        _TRACES[types] = trace
        best = max(r.train_acc for r in trace)
        return Outcome(best >= threshold, f"best {best:.4f}, final {trace[-1].train_acc:.4f}",
                       f">= {threshold:.2f} within 500 steps")
    return fn


def _trace_determinism() -> Outcome:
    same = True
    for types in ("LLGG", "LLHH"):
        a = _train_tiny(types, steps=40, seed=3)
        b = _train_tiny(types, steps=40, seed=3)
        same &= [(r.step, r.lr, r.loss, r.train_acc) for r in a] == [(r.step, r.lr, r.loss, r.train_acc) for r in b]
    return Outcome(same, "bit-identical" if same else "traces differ", "bit-identical traces")


def _build_determinism() -> Outcome:
    bad = []
    for name in PRESETS:
        a = model_state(build_model(preset(name), seed=11))
        b = model_state(build_model(preset(name), seed=11))
        if a.keys() != b.keys() or any(not np.array_equal(a[k], b[k]) for k in a):
            bad.append(name)
        del a, b
        gc.collect()
    return Outcome(not bad, "identical" if not bad else f"differs: {bad}", "same seed -> same parameters")


def _roundtrip() -> Outcome:
    bad = []
    for name in PRESETS:
        state = model_state(build_model(preset(name), seed=5))
        back = decode(encode(state))
        if back.keys() != state.keys() or any(back[k].tobytes() != state[k].tobytes() for k in state):
            bad.append(name)
        del state, back
        gc.collect()
    return Outcome(not bad, "bit-exact" if not bad else f"differs: {bad}", "bit-exact for all presets")


CRITERIA: List[Criterion] = (
    [Criterion(f"params/{n}", _params_check(n), 1.0) for n in ("S", "B", "L", "XXS", "XS")]
    + [Criterion("flops/S@224", _flops_check("S"), 1.0),
       Criterion("flops/B@224", _flops_check("B"), 1.0),
       Criterion("flops/L@224", _flops_check("L"), 1.0, known_failure=L_FLOPS_NOTE),
       Criterion("flops/S-video-16x224", _video_flops, 1.0),
       Criterion("light/XXS@128", _light_check(128, 0.5, 0.43e9), 1.0),
       Criterion("light/XXS@160", _light_check(160, 0.5, 0.67e9), 1.0),
       Criterion("light/XXS@160-ratio1.0", _light_check(160, 1.0, 0.91e9), 1.0),
       Criterion("light/ratio0.5-saving", _shrink_saving, 1.0),
       Criterion("resolution/stage3-matmul-share@1008", _stage3_share, 1.0),
       Criterion("resolution/global-matmul-x16", _global_scaling, 1.0),
       Criterion("resolution/window-matmul-x4", _window_scaling, 1.0),
       Criterion("equivalence-suite", _equivalence, 30.0),
       Criterion("gradient-suite", _gradients, 120.0),
       Criterion("train/tiny-LLGG>=0.95", _trainability("LLGG", 0.95), 600.0),
       Criterion("train/tiny-hourglass>=0.90", _trainability("LLHH", 0.90), 600.0),
       Criterion("train/trace-determinism", _trace_determinism, 600.0),
       Criterion("determinism/build-all-presets", _build_determinism, 120.0),
       Criterion("serialization/roundtrip-all-presets", _roundtrip, 120.0)]
)


def run_criterion(c: Criterion) -> Result:
    t0 = time.perf_counter()
    out = c.fn()
    dt = time.perf_counter() - t0
    passed = out.passed and dt <= c.time_limit
    measured = out.measured if dt <= c.time_limit else f"{out.measured} (over {c.time_limit:g}s)"
    return Result(c.name, passed, measured, out.target, dt, c.known_failure)


def run_all(select: Optional[str] = None, echo: Optional[Callable[[str], None]] = None) -> List[Result]:
    results = []
    for c in CRITERIA:
        if select and select not in c.name:
            continue
        r = run_criterion(c)
        if echo:
            echo(r.line())
        results.append(r)
    return results


def criterion(name: str) -> Criterion:
    for c in CRITERIA:
        if c.name == name:
            return c
    raise KeyError(name)


__all__ = ["CRITERIA", "Criterion", "Outcome", "Result", "criterion", "run_all", "run_criterion"]
