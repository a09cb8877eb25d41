"""Shared fixtures.  ``toy_run`` executes the shipped-seed pipeline once per session."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest

from geluless_swin import data
from geluless_swin.config import RunConfig
from geluless_swin.distill import (
    DistillLog,
    eval_accuracy,
    gelu_replace_distill,
    naive_swap,
    train_teacher,
)
from geluless_swin.quant import CalibrationRecord, Mode, QuantSwinModel, calibrate_activations, quantize_model
from geluless_swin.swin import SwinConfig, SwinModel, init_model

SHIPPED_SEED = 0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    # One stage of two blocks on an 8x8 token grid: exercises shift and mask, runs in milliseconds.
    return SwinConfig(image_size=16, patch_size=2, embed_dim=16, depths=(2,), num_heads=(2,), window_size=4)


@pytest.fixture
def small_model(small_config):
    return init_model(small_config, seed=3)


@dataclass
class ToyRun:
    cfg: RunConfig
    train: data.Dataset
    eval: data.Dataset
    teacher: SwinModel
    teacher_snapshot: dict
    student: SwinModel
    log: DistillLog
    naive: SwinModel
    teacher_acc: float
    student_acc: float
    naive_acc: float
    record_teacher: CalibrationRecord
    record_student: CalibrationRecord
    q_standard: QuantSwinModel
    q_geluless: QuantSwinModel
    seconds: float


def _calibration_batches(ds: data.Dataset, cfg: RunConfig):
    n = min(cfg.calib.num_samples, len(ds))
    bs = cfg.calib.batch_size
    return [ds.images[i : min(i + bs, n)] for i in range(0, n, bs)]


@pytest.fixture(scope="session")
def toy_run() -> ToyRun:
    start = time.perf_counter()
    cfg = RunConfig(seed=SHIPPED_SEED)
    train, evaluation = data.generate_split(cfg.seed, cfg.data.n_train, cfg.data.n_eval)
    teacher = init_model(cfg.model, seed=cfg.seed)
    t = cfg.teacher
    train_teacher(teacher, train, t.epochs, t.learning_rate, t.momentum, t.batch_size, seed=cfg.seed)
    snapshot = {k: p.value.copy() for k, p in teacher.params.items()}
    student, log = gelu_replace_distill(teacher, train, cfg.distill, eval_set=evaluation)
    naive = naive_swap(teacher)
    rec_t = calibrate_activations(teacher, _calibration_batches(train, cfg))
    rec_s = calibrate_activations(student, _calibration_batches(train, cfg))
    return ToyRun(
        cfg=cfg,
        train=train,
        eval=evaluation,
        teacher=teacher,
        teacher_snapshot=snapshot,
        student=student,
        log=log,
        naive=naive,
        teacher_acc=eval_accuracy(teacher, evaluation),
        student_acc=eval_accuracy(student, evaluation),
        naive_acc=eval_accuracy(naive, evaluation),
        record_teacher=rec_t,
        record_student=rec_s,
        q_standard=quantize_model(teacher, rec_t, Mode.STANDARD),
        q_geluless=quantize_model(student, rec_s, Mode.GELU_LESS),
        seconds=time.perf_counter() - start,
    )


ACCEPTANCE_LINES: list = []


def record_criterion(number: int, ok: bool, detail: str):
    """Print and remember one pass/fail line; the summary hook repeats them at the end."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
