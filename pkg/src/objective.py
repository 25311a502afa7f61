#!/usr/bin/env python3
"""
Objective - Loss terms of co-regularized domain alignment and their compositions.

Per hypothesis:
    L(f_i) = L_y + lambda_d L_d + lambda_sv L_vt(source) + lambda_ce (L_ce + L_vt(target))
Pair:
    total = L(f_1) + L(f_2) + lambda_p L_p - lambda_div D_g
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import CLAMP_EPS, Tensor
from config import LossWeights
from errors import ShapeError

logger = logging.getLogger(__name__)

ArrayLike = ad.ArrayLike
ProbFn = Callable[[Tensor], Tensor]

STOCHASTIC_TOL = 1e-5


@dataclass
class DomainBatch:
    """Labeled source minibatch and unlabeled target minibatch (no target label field)."""
    source_x: np.ndarray
    source_y: np.ndarray  # one-hot
    target_x: np.ndarray

    @property
    def size(self) -> int:
        return len(self.source_x)


@dataclass
class VadaTerms:
    l_y: float
    l_d: float
    l_sv: float
    l_ce: float
    l_vt: float
    total: float

    @property
    def l_ce_plus_vt(self) -> float:
        return self.l_ce + self.l_vt


@dataclass
class LossBreakdown:
    hypotheses: List[VadaTerms] = field(default_factory=list)
    l_p: float = 0.0
    d_g: float = 0.0
    total: float = 0.0

    def recomposed(self, w: LossWeights) -> float:
        return sum(h.total for h in self.hypotheses) + w.lambda_p * self.l_p - w.lambda_div * self.d_g


@dataclass
class VatTargets:
    """Constants entering the VAT terms: perturbations and clean predictions per domain."""
    source_r: Optional[np.ndarray] = None
    source_p: Optional[np.ndarray] = None
    target_r: Optional[np.ndarray] = None
    target_p: Optional[np.ndarray] = None


@dataclass
class HypothesisOutputs:
    feats_s: Tensor
    feats_t: Tensor
    probs_s: Tensor
    probs_t: Tensor


def _check_stochastic(op: str, probs: Tensor) -> None:
    if probs.ndim != 2:
        raise ShapeError(f"{op}: expected (N, K) probabilities, got {probs.shape}")
    sums = probs.data.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=STOCHASTIC_TOL, rtol=0):
        worst = float(np.abs(sums - 1.0).max())
        raise ValueError(f"{op}: rows must sum to 1 (max deviation {worst:.3g})")


def cross_entropy_source(probs: Tensor, onehot: ArrayLike) -> Tensor:
    """-mean_x y^T ln f(x) with clamped logs."""
    onehot = ad.as_tensor(onehot)
    _check_stochastic("cross_entropy_source", probs)
    if probs.shape != onehot.shape:
        raise ShapeError(f"cross_entropy_source: probs {probs.shape} vs labels {onehot.shape}")
    return -ad.mean(ad.sum_(onehot * ad.log(probs), axis=1))


def discriminator_loss(d_source: Tensor, d_target: Tensor) -> Tensor:
    """mean ln d(g(x_s)) + mean ln(1 - d(g(x_t))); the discriminator ascends it."""
    for name, t in (("source", d_source), ("target", d_target)):
        if np.any(t.data < 0) or np.any(t.data > 1):
            raise ValueError(f"discriminator_loss: {name} outputs outside [0, 1]")
    return ad.mean(ad.log(d_source)) + ad.mean(ad.log(1.0 - d_target))


def agreement_loss(probs1: Tensor, probs2: Tensor) -> Tensor:
    """Mean L1 distance between two predictive distributions (in [0, 2])."""
    if probs1.shape != probs2.shape:
        raise ShapeError(f"agreement_loss: shapes {probs1.shape} and {probs2.shape} differ")
    return ad.mean(ad.l1_norm(probs1 - probs2, axis=1))


def diversity_penalty(feats1: Tensor, feats2: Tensor, nu: float) -> Tensor:
    """min(nu, ||mean g_1 - mean g_2||^2) over a source minibatch."""
    if feats1.shape != feats2.shape:
        raise ShapeError(f"diversity_penalty: shapes {feats1.shape} and {feats2.shape} differ")
    if feats1.shape[0] == 0:
        raise ShapeError("diversity_penalty: empty batch")
    f1, f2 = ad.flatten(feats1), ad.flatten(feats2)
    gap = ad.sq_norm(ad.mean(f1, axis=0) - ad.mean(f2, axis=0), axis=0)
    return ad.minimum(gap, nu)


def conditional_entropy(probs: Tensor) -> Tensor:
    """-mean_x f(x)^T ln f(x)."""
    _check_stochastic("conditional_entropy", probs)
    return -ad.mean(ad.sum_(probs * ad.log(probs), axis=1))


def kl_divergence(teacher: ArrayLike, student: Tensor) -> Tensor:
    """mean_x KL(teacher(x) || student(x)); the teacher is a constant, 0 ln 0 := 0."""
    p = ad.as_tensor(teacher).data
    log_p = np.log(np.maximum(p, CLAMP_EPS))
    cross = ad.sum_(ad.as_tensor(p) * ad.log(student), axis=1)
    return ad.mean(ad.sub(Tensor((p * log_p).sum(axis=1)), cross))


def _unit_rows(v: np.ndarray) -> np.ndarray:
    flat = v.reshape(len(v), -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    return (flat / np.maximum(norms, 1e-12)[:, None]).reshape(v.shape)


def vat_perturbation(model: ProbFn, x: ArrayLike, eps: float, rng: np.random.Generator,
                     xi: float = 1e-6, teacher: Optional[np.ndarray] = None) -> np.ndarray:
    """Approximate the KL-maximizing perturbation of norm ``eps`` per sample (one power iteration)."""
    x = ad.as_tensor(x).data
    if eps == 0:
        return np.zeros_like(x)
    u = _unit_rows(rng.normal(size=x.shape))
    if teacher is None:
        with ad.no_grad():
            teacher = model(Tensor(x)).data
    d = Tensor(xi * u, requires_grad=True)
    with ad.Tape() as tape:
        kl = kl_divergence(teacher, model(Tensor(x) + d))
    if not kl.requires_grad:
        return eps * u
    (grad,) = ad.gradients(tape, kl, [d])
    dead = np.sqrt((grad.reshape(len(grad), -1) ** 2).sum(axis=1)) == 0
    if np.any(dead):
        logger.debug(f"VAT: zero gradient for {int(dead.sum())} sample(s); keeping the random direction")
        grad = np.where(dead.reshape((-1,) + (1,) * (grad.ndim - 1)), u, grad)
    return eps * _unit_rows(grad)


def vat_loss(model: ProbFn, x: ArrayLike, r: np.ndarray, teacher: Optional[np.ndarray] = None) -> Tensor:
    """mean KL(f(x) || f(x + r)) with f(x) held constant."""
    x = ad.as_tensor(x).data
    if teacher is None:
        with ad.no_grad():
            teacher = model(Tensor(x)).data
    return kl_divergence(teacher, model(Tensor(x + r)))


def vat_model(hyp) -> ProbFn:
    def f(x: Tensor) -> Tensor:
        return hyp.probs(x, hyp.context(stochastic=False, update_stats=False))
    return f


def prepare_vat(hyp, batch: DomainBatch, w: LossWeights, xi: float = 1e-6,
                source: bool = True, target: bool = True) -> VatTargets:
    """Perturbations and clean predictions for the VAT terms that carry weight."""
    model = vat_model(hyp)
    params = list(hyp.classifier_parameters().values())
    out = VatTargets()
    with ad.frozen(params):
        if source and w.lambda_sv > 0 and w.eps_vat_source > 0:
            with ad.no_grad():
                out.source_p = model(Tensor(batch.source_x)).data
            out.source_r = vat_perturbation(model, batch.source_x, w.eps_vat_source, hyp.rng, xi, out.source_p)
        if target and w.lambda_ce > 0 and w.eps_vat_target > 0:
            with ad.no_grad():
                out.target_p = model(Tensor(batch.target_x)).data
            out.target_r = vat_perturbation(model, batch.target_x, w.eps_vat_target, hyp.rng, xi, out.target_p)
    return out


def forward_hypothesis(hyp, batch: DomainBatch, update_stats: bool = True) -> HypothesisOutputs:
    """Source and target passes; running statistics follow the target pass only."""
    ctx_s = hyp.context(stochastic=True, update_stats=False)
    feats_s = hyp.features(Tensor(batch.source_x), ctx_s)
    probs_s = ad.softmax(hyp.logits_from_features(feats_s, ctx_s))
    ctx_t = hyp.context(stochastic=True, update_stats=update_stats)
    feats_t = hyp.features(Tensor(batch.target_x), ctx_t)
    probs_t = ad.softmax(hyp.logits_from_features(feats_t, ctx_t))
    return HypothesisOutputs(feats_s, feats_t, probs_s, probs_t)


def vada_loss(hyp, batch: DomainBatch, w: LossWeights, outputs: Optional[HypothesisOutputs] = None,
              vat: Optional[VatTargets] = None) -> Tuple[Tensor, VadaTerms]:
    """Per-hypothesis objective L(f_i) and its terms."""
    outputs = outputs or forward_hypothesis(hyp, batch)
    if vat is None:
        vat = prepare_vat(hyp, batch, w)
    zero = Tensor(0.0)

    l_y = cross_entropy_source(outputs.probs_s, batch.source_y)
    l_d = discriminator_loss(hyp.discriminate(outputs.feats_s), hyp.discriminate(outputs.feats_t))
    l_ce = conditional_entropy(outputs.probs_t)
    model = vat_model(hyp)
    l_sv = vat_loss(model, batch.source_x, vat.source_r, vat.source_p) if vat.source_r is not None else zero
    l_vt = vat_loss(model, batch.target_x, vat.target_r, vat.target_p) if vat.target_r is not None else zero

    total = l_y + w.lambda_d * l_d + w.lambda_sv * l_sv + w.lambda_ce * (l_ce + l_vt)
    terms = VadaTerms(l_y=l_y.item(), l_d=l_d.item(), l_sv=l_sv.item(), l_ce=l_ce.item(),
                      l_vt=l_vt.item(), total=total.item())
    return total, terms


def coda_total(pair, batch: DomainBatch, w: LossWeights,
               vat: Optional[Sequence[VatTargets]] = None) -> Tuple[Tensor, LossBreakdown]:
    """Full co-regularized objective and its breakdown."""
    members = pair.members
    # a fully shared batch norm takes one running-statistics update per step
    shared = pair.shares_batchnorm
    outputs = [forward_hypothesis(m, batch, update_stats=i == 0 or not shared) for i, m in enumerate(members)]
    breakdown = LossBreakdown()
    total: Tensor = Tensor(0.0)
    for i, (m, out) in enumerate(zip(members, outputs)):
        loss, terms = vada_loss(m, batch, w, out, vat[i] if vat is not None else None)
        total = total + loss
        breakdown.hypotheses.append(terms)
    if len(members) == 2:
        l_p = agreement_loss(outputs[0].probs_t, outputs[1].probs_t)
        d_g = diversity_penalty(outputs[0].feats_s, outputs[1].feats_s, w.nu)
        total = total + w.lambda_p * l_p - w.lambda_div * d_g
        breakdown.l_p, breakdown.d_g = l_p.item(), d_g.item()
    breakdown.total = total.item()
    return total, breakdown


def anchor_probs(student, target_x: np.ndarray) -> Tensor:
    """Student predictions in the teacher's mode: eval-mode batch norm, stochastic layers off, no stat updates."""
    was_training = student.training
    student.eval()
    try:
        return student.probs(Tensor(target_x), student.context(stochastic=False, update_stats=False))
    finally:
        student.train(was_training)


def dirtt_loss(student, teacher_probs: np.ndarray, target_x: np.ndarray, w: LossWeights,
               vat_r: Optional[np.ndarray] = None, vat_p: Optional[np.ndarray] = None) -> Tensor:
    """lambda_ce (L_ce + L_vt) + beta KL(teacher || student) on target data only.

    The KL anchor compares against a deterministic student pass so it is exactly
    zero, with zero gradient, while the student still equals the teacher.
    """
    loss: Tensor = Tensor(0.0)
    if w.beta_dirt > 0:
        loss = w.beta_dirt * kl_divergence(teacher_probs, anchor_probs(student, target_x))
    ctx = student.context(stochastic=True, update_stats=True)
    probs = student.probs(Tensor(target_x), ctx)
    loss = loss + w.lambda_ce * conditional_entropy(probs)
    if vat_r is not None:
        loss = loss + w.lambda_ce * vat_loss(vat_model(student), target_x, vat_r, vat_p)
    return loss
