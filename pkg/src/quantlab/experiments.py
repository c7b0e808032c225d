"""Paired experiments: QAT versus PTQ, and γ retention under PTQ.

Both arms start from one float32 model trained until the convergence rule
fires (capped at ``pretrain_steps``). PTQ quantizes that model directly;
QAT continues from it with fake quantization until convergence (capped at
``finetune_steps``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from quantlab.calibration import CalibrationSet, ScaleRule
from quantlab.nn import ModelGraph, build_mlp
from quantlab.ptq import PtqConfig, run_ptq
from quantlab.training import (
    FakeQuantConfig,
    LabeledSet,
    TrainConfig,
    evaluate_model,
    layer_quant_params,
    make_synthetic_task,
    quantized_copy,
    train,
)


@dataclass(frozen=True)
class PairedSetup:
    in_dim: int = 16
    out_dim: int = 4
    depth: int = 5
    width: int = 256
    n_train: int = 3072
    n_test: int = 1024
    pretrain_steps: int = 3000
    finetune_steps: int = 1000
    learning_rate: float = 0.02
    batch_size: int = 32

    def dims(self) -> list:
        return [self.in_dim] + [self.width] * self.depth + [self.out_dim]


def teacher_split(setup: PairedSetup, seed: int) -> tuple[LabeledSet, LabeledSet]:
    data = make_synthetic_task("teacher", (setup.in_dim, setup.out_dim), setup.n_train + setup.n_test, seed)
    return data.split(setup.n_train)


def _cfg(setup: PairedSetup, steps: int, seed: int, fq=None) -> TrainConfig:
    return TrainConfig(
        learning_rate=setup.learning_rate,
        batch_size=setup.batch_size,
        max_steps=steps,
        seed=seed,
        fake_quant=fq,
    )


@dataclass(frozen=True)
class Pretrained:
    seed: int
    model: ModelGraph
    train_set: LabeledSet
    test_set: LabeledSet


def pretrain(seed: int, setup: PairedSetup = PairedSetup()) -> Pretrained:
    """The shared float32 starting point for both paired experiments."""
    train_set, test_set = teacher_split(setup, seed)
    model = build_mlp(setup.dims(), seed)
    fp32, _ = train(model, train_set, _cfg(setup, setup.pretrain_steps, seed))
    return Pretrained(seed, fp32, train_set, test_set)


@dataclass(frozen=True)
class QatVsPtq:
    seed: int
    fp32_loss: float
    ptq_loss: float
    qat_loss: float


def qat_vs_ptq(
    seed: int, bits: int = 4, setup: PairedSetup = PairedSetup(), base: Optional[Pretrained] = None
) -> QatVsPtq:
    base = base or pretrain(seed, setup)
    fp32, train_set, test_set = base.model, base.train_set, base.test_set
    cal = CalibrationSet.from_array(train_set.inputs[:256])
    ptq_model, _ = run_ptq(fp32, cal, PtqConfig(bits=bits))

    fq = FakeQuantConfig(bits, ScaleRule.ALG1)
    qat, _ = train(fp32, train_set, _cfg(setup, setup.finetune_steps, seed + 1, fq))
    qat_model = quantized_copy(qat, layer_quant_params(qat, fq))

    return QatVsPtq(
        seed,
        evaluate_model(fp32, test_set).loss,
        evaluate_model(ptq_model, test_set).loss,
        evaluate_model(qat_model, test_set).loss,
    )


@dataclass(frozen=True)
class GammaRetention:
    seed: int
    fp32_loss: float
    loss_with_gamma: float
    loss_without_gamma: float

    @property
    def degradation_with_gamma(self) -> float:
        return (self.loss_with_gamma - self.fp32_loss) / self.fp32_loss

    @property
    def degradation_without_gamma(self) -> float:
        return (self.loss_without_gamma - self.fp32_loss) / self.fp32_loss


def gamma_retention(
    seed: int, bits: int = 8, setup: PairedSetup = PairedSetup(), base: Optional[Pretrained] = None
) -> GammaRetention:
    base = base or pretrain(seed, setup)
    fp32, train_set, test_set = base.model, base.train_set, base.test_set
    cal = CalibrationSet.from_array(train_set.inputs[:256])
    with_g, _ = run_ptq(fp32, cal, PtqConfig(bits=bits, use_gamma=True))
    without_g, _ = run_ptq(fp32, cal, PtqConfig(bits=bits, use_gamma=False))
    return GammaRetention(
        seed,
        evaluate_model(fp32, test_set).loss,
        evaluate_model(with_g, test_set).loss,
        evaluate_model(without_g, test_set).loss,
    )
