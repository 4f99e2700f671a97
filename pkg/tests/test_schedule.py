import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskt5.schedule import ScheduleSpec, constant_lr, cosine_lr, isr_lr, lr_at


def isr(base=1.0, warmup=10_000, total=65_536):
    return ScheduleSpec("isr", base, None, warmup, total)


def cos(peak=1e-2, final=1e-4, warmup=100, total=1100):
    return ScheduleSpec("cosine", peak, final, warmup, total)


def test_isr_examples():
    assert isr_lr(0, isr()) == 0.01
    assert isr_lr(10_000, isr()) == 0.01
    assert isr_lr(65_536, isr()) == 1 / 256 == 0.00390625


def test_isr_zero_warmup_guard():
    with pytest.raises(ZeroDivisionError):
        isr_lr(0, isr(warmup=0))
    assert isr_lr(4, isr(warmup=0)) == 0.5


def test_cosine_boundaries_and_midpoint():
    spec = cos()
    assert abs(cosine_lr(100, spec) - 1e-2) <= 1e-12
    assert abs(cosine_lr(1100, spec) - 1e-4) <= 1e-12
    assert abs(cosine_lr(600, spec) - (1e-2 + 1e-4) / 2) <= 1e-12
    assert cosine_lr(0, spec) == 0.0
    assert cosine_lr(5000, spec) == 1e-4


def test_cosine_default_final_is_twentieth():
    spec = ScheduleSpec("cosine", 2e-2, None, 10, 110)
    assert abs(cosine_lr(110, spec) - 1e-3) <= 1e-12


def test_constant_examples():
    spec = ScheduleSpec("constant", 0.3, None, 10, 100)
    assert constant_lr(0, spec) == 0.0
    assert constant_lr(10, spec) == 0.3
    assert constant_lr(200, spec) == 0.3


def test_warmup_continuity():
    for spec in (cos(), ScheduleSpec("constant", 0.3, None, 50, 100)):
        w = spec.warmup_steps
        left = lr_at(w - 1, spec) + (lr_at(w - 1, spec) - lr_at(w - 2, spec))
        assert abs(left - lr_at(w, spec)) <= 1e-12
    spec = isr(base=2.0, warmup=400)
    assert abs(isr_lr(399, spec) - isr_lr(400, spec)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 1000))
def test_cosine_symmetry(k):
    spec = cos(warmup=100, total=1100)
    assert abs(cosine_lr(100 + k, spec) + cosine_lr(1100 - k, spec) - (1e-2 + 1e-4)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 5000), st.integers(1, 3000), st.sampled_from(["isr", "cosine"]))
def test_non_increasing_after_warmup(warmup, span, kind):
    spec = ScheduleSpec(kind, 1.0, 0.01, warmup, warmup + span)
    steps = sorted({warmup, warmup + 1, warmup + span // 3, warmup + span // 2, warmup + span, warmup + 2 * span})
    lrs = [lr_at(max(s, 1), spec) for s in steps]
    assert all(a >= b - 1e-15 for a, b in zip(lrs, lrs[1:]))


def test_spec_validation():
    with pytest.raises(ValueError):
        ScheduleSpec("linear")
    with pytest.raises(ValueError):
        ScheduleSpec("cosine", 1.0, None, 200, 100)
    with pytest.raises(ValueError):
        ScheduleSpec("cosine", -1.0, None, 1, 100)
    with pytest.raises(ValueError):
        isr_lr(-1, isr())
