#!/usr/bin/env python3
"""
Trainer - Alternating discriminator/classifier optimization for a hypothesis pair, Polyak
averaging, periodic evaluation, and the target-only DIRT-T refinement phase.
"""
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

import autodiff as ad
from checkpoint import load_checkpoint, rng_from_array, rng_to_array, save_checkpoint
from config import DirtTConfig, LossWeights, ProbeConfig, TrainConfig
from datagen import DomainBatchSampler, DomainDataset, EpochSampler
from errors import CheckpointShapeError, DataError
from evaluator import MetricsRecord, MetricsWriter, accuracy, evaluate_pair, feature_probe
from models import Hypothesis, HypothesisPair
from objective import (DomainBatch, LossBreakdown, coda_total, dirtt_loss, discriminator_loss, prepare_vat,
                       vat_model, vat_perturbation)
from optimizers import AdamState, EmaState, adam_step, ema_applied, ema_update

logger = logging.getLogger(__name__)

EvalHook = Callable[[MetricsRecord], None]


def _adam(config: TrainConfig) -> AdamState:
    return AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)


class CoDATrainer:
    """Owns the optimizer, EMA and sampling state of one training run."""

    def __init__(self, pair: HypothesisPair, config: TrainConfig, source: DomainDataset, target: DomainDataset,
                 validation: Optional[DomainDataset] = None, probe: Optional[ProbeConfig] = None):
        self.pair = pair
        self.config = config
        self.source = source
        self.target = target
        self.validation = validation
        self.probe = probe
        self.sampler = DomainBatchSampler(source, target.unlabeled(), config.batch_size, config.seed)
        self.disc_opt = _adam(config)
        self.cls_opt = _adam(config)
        self.ema = EmaState.track(pair.classifier_parameters(), config.ema_momentum)
        self.iteration = 0

    @property
    def weights(self) -> LossWeights:
        return self.config.weights

    def discriminator_step(self, batch: DomainBatch) -> float:
        """One ascent step on L_disc for every discriminator; features enter as constants."""
        params = self.pair.discriminator_parameters()
        feats = []
        with ad.no_grad():
            for m in self.pair.members:
                feats_s = m.features(ad.Tensor(batch.source_x), m.context(stochastic=True, update_stats=False))
                feats_t = m.features(ad.Tensor(batch.target_x), m.context(stochastic=True, update_stats=False))
                feats.append((feats_s, feats_t))
        with ad.Tape() as tape:
            l_disc = ad.Tensor(0.0)
            for m, (feats_s, feats_t) in zip(self.pair.members, feats):
                l_disc = l_disc + discriminator_loss(m.discriminate(feats_s), m.discriminate(feats_t))
            objective = -l_disc
        names = list(params)
        grads = ad.gradients(tape, objective, [params[n] for n in names])
        adam_step(self.disc_opt, params, dict(zip(names, grads)))
        return l_disc.item()

    def classifier_step(self, batch: DomainBatch) -> LossBreakdown:
        """One descent step on the full objective for every g_i, h_i with the discriminators held fixed."""
        params = self.pair.classifier_parameters()
        disc = list(self.pair.discriminator_parameters().values())
        vat = [prepare_vat(m, batch, self.weights, self.config.vat_xi) for m in self.pair.members]
        with ad.frozen(disc):
            with ad.Tape() as tape:
                total, breakdown = coda_total(self.pair, batch, self.weights, vat)
            names = list(params)
            grads = ad.gradients(tape, total, [params[n] for n in names])
        adam_step(self.cls_opt, params, dict(zip(names, grads)))
        return breakdown

    def train_step(self, batch: Optional[DomainBatch] = None) -> LossBreakdown:
        batch = batch if batch is not None else self.sampler.sample()
        self.pair.train()
        l_disc = self.discriminator_step(batch)
        breakdown = self.classifier_step(batch)
        ema_update(self.ema, self.pair.classifier_parameters())
        self.iteration += 1
        logger.debug(f"step {self.iteration}: total={breakdown.total:.6f} l_disc={l_disc:.6f}")
        return breakdown

    def evaluate(self, with_probe: bool = False) -> MetricsRecord:
        """Metrics with the averaged weights and stochastic layers off."""
        self.pair.eval()
        try:
            with ema_applied(self.ema, self.pair.classifier_parameters()):
                knn = None
                if with_probe and self.probe is not None and self.probe.enabled and self.target.labels is not None:
                    knn = feature_probe(self.pair.members[0], self.source, self.target, self.probe,
                                        self.config.seed)
                return evaluate_pair(self.pair, self.iteration, self.source, self.target, self.weights,
                                     self.validation, knn)
        finally:
            self.pair.train()

    def run(self, iterations: Optional[int] = None, writer: Optional[MetricsWriter] = None,
            on_eval: Optional[EvalHook] = None, checkpoint_path: Optional[Path] = None) -> List[MetricsRecord]:
        """Train up to ``iterations`` total steps, evaluating every ``eval_every`` and at the end."""
        total = self.config.iterations if iterations is None else iterations
        records: List[MetricsRecord] = []

        def emit(record: MetricsRecord) -> None:
            records.append(record)
            if writer is not None:
                writer.write(record)
            if on_eval is not None:
                on_eval(record)
            logger.info(f"iter {record.iter}: acc_tgt_1={record.acc_tgt_1:.4f}"
                        + (f" acc_tgt_2={record.acc_tgt_2:.4f} agree={record.agree:.4f}"
                           if record.acc_tgt_2 is not None else ""))

        if self.iteration == 0:
            emit(self.evaluate(with_probe=total == 0))
        every = self.config.eval_every
        while self.iteration < total:
            self.train_step()
            last = self.iteration == total
            if self.iteration % every == 0 or last:
                emit(self.evaluate(with_probe=last))
            if checkpoint_path is not None and self.config.checkpoint_every \
                    and self.iteration % self.config.checkpoint_every == 0:
                self.save(checkpoint_path)
        return records

    def state_dict(self) -> Dict[str, np.ndarray]:
        state: Dict[str, np.ndarray] = {}
        for name, p in self.pair.parameters().items():
            state[f"param/{name}"] = p.data
        for name, value in self.pair.named_buffers().items():
            state[f"buffer/{name}"] = value
        state.update(self.disc_opt.state_arrays("adam_disc"))
        state.update(self.cls_opt.state_arrays("adam_cls"))
        for name, value in self.ema.shadow.items():
            state[f"ema/{name}"] = value
        for m in self.pair.members:
            state[f"rng/f{m.index}"] = rng_to_array(m.rng)
        for side, stream in (("source", self.sampler.source_stream), ("target", self.sampler.target_stream)):
            state[f"rng/sampler.{side}"] = rng_to_array(stream.rng)
            state[f"sampler/{side}.perm"] = stream.perm.astype(np.int64)
            state[f"sampler/{side}.cursor"] = np.array([stream.cursor], dtype=np.int64)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], iteration: int) -> None:
        params = self.pair.parameters()
        for name, p in params.items():
            value = _require(state, f"param/{name}", p.shape)
            p.data = np.array(value, dtype=p.data.dtype, copy=True)
        buffers = self.pair.named_buffers()
        self.pair.load_buffers({name: _require(state, f"buffer/{name}", value.shape)
                                for name, value in buffers.items()})
        cls_names = list(self.pair.classifier_parameters())
        self.disc_opt.load_arrays("adam_disc", state, list(self.pair.discriminator_parameters()))
        self.cls_opt.load_arrays("adam_cls", state, cls_names)
        self.ema.shadow = {name: np.array(_require(state, f"ema/{name}", params[name].shape), copy=True)
                           for name in cls_names}
        for m in self.pair.members:
            m.rng = rng_from_array(_require(state, f"rng/f{m.index}", (6,)))
        for side, stream in (("source", self.sampler.source_stream), ("target", self.sampler.target_stream)):
            _restore_stream(stream, state, side)
        self.iteration = iteration

    def save(self, path: Path) -> None:
        save_checkpoint(path, self.iteration, self.state_dict())
        logger.info(f"Checkpoint written to {path} at iteration {self.iteration}")

    def load(self, path: Path) -> None:
        iteration, state = load_checkpoint(path)
        self.load_state_dict(state, iteration)
        logger.info(f"Resumed from {path} at iteration {iteration}")


def _require(state: Dict[str, np.ndarray], key: str, shape) -> np.ndarray:
    if key not in state:
        raise CheckpointShapeError(key, "missing from checkpoint")
    value = state[key]
    if tuple(value.shape) != tuple(shape):
        raise CheckpointShapeError(key, f"shape {tuple(value.shape)} does not match model {tuple(shape)}")
    return value


def _restore_stream(stream: EpochSampler, state: Dict[str, np.ndarray], side: str) -> None:
    stream.rng = rng_from_array(_require(state, f"rng/sampler.{side}", (6,)))
    stream.perm = np.array(_require(state, f"sampler/{side}.perm", (stream.n,)), copy=True)
    stream.cursor = int(_require(state, f"sampler/{side}.cursor", (1,))[0])


def run_training(pair: HypothesisPair, config: TrainConfig, source: DomainDataset, target: DomainDataset,
                 validation: Optional[DomainDataset] = None, probe: Optional[ProbeConfig] = None,
                 metrics_path: Optional[Path] = None, checkpoint_path: Optional[Path] = None) -> CoDATrainer:
    """Build a trainer and run it to ``config.iterations``, checkpointing at the end when a path is given."""
    trainer = CoDATrainer(pair, config, source, target, validation, probe)
    if metrics_path is not None:
        with MetricsWriter(metrics_path) as writer:
            trainer.run(writer=writer, checkpoint_path=checkpoint_path)
    else:
        trainer.run(checkpoint_path=checkpoint_path)
    if checkpoint_path is not None:
        trainer.save(checkpoint_path)
    return trainer


class DirtTRefiner:
    """Target-only refinement of one hypothesis, KL-anchored to a periodically refreshed teacher."""

    def __init__(self, hypothesis: Hypothesis, config: DirtTConfig, train: TrainConfig, target: DomainDataset,
                 initial: Optional[Dict[int, np.ndarray]] = None):
        # student starts from ``initial`` (the EMA weights keyed by parameter id) and owns its own copy
        self.student = hypothesis.clone(initial)
        self.student.rng = np.random.default_rng([train.seed, 100 + hypothesis.index])
        self.config = config
        self.train_config = train
        self.weights = train.weights
        batch_size = config.batch_size or train.batch_size
        self.stream = EpochSampler(len(target), batch_size, np.random.default_rng([train.seed, 200 + hypothesis.index]))
        self.target = target
        self.opt = _adam(train)
        # step size lr / max(1, beta): a dominant anchor pins the parameters
        self.opt.lr = train.lr / max(1.0, train.weights.beta_dirt)
        params = self.student.classifier_parameters()
        self.ema = EmaState.track(params, train.ema_momentum)
        self.teacher = self.student.clone()
        self.iteration = 0

    def _refresh_teacher(self) -> None:
        params = self.student.classifier_parameters()
        ids = {id(p): self.ema.shadow[name] for name, p in params.items()}
        self.teacher = self.student.clone(ids)
        logger.debug(f"DIRT-T f{self.student.index}: teacher refreshed at step {self.iteration}")

    def step(self) -> float:
        x = self.target.inputs[self.stream.next_indices()]
        self.teacher.eval()
        teacher_probs = self.teacher.predict_proba(x)
        self.student.train()
        params = self.student.classifier_parameters()
        w = self.weights
        vat_r = vat_p = None
        if w.lambda_ce > 0 and w.eps_vat_target > 0:
            with ad.frozen(list(params.values())):
                model = vat_model(self.student)
                with ad.no_grad():
                    vat_p = model(ad.Tensor(x)).data
                vat_r = vat_perturbation(model, x, w.eps_vat_target, self.student.rng, self.train_config.vat_xi, vat_p)
        with ad.Tape() as tape:
            loss = dirtt_loss(self.student, teacher_probs, x, w, vat_r, vat_p)
        names = list(params)
        grads = ad.gradients(tape, loss, [params[n] for n in names])
        adam_step(self.opt, params, dict(zip(names, grads)))
        ema_update(self.ema, params)
        self.iteration += 1
        if self.iteration % self.config.refresh_interval == 0:
            self._refresh_teacher()
        return loss.item()

    def run(self, iterations: Optional[int] = None) -> Hypothesis:
        """Refine and return a fresh hypothesis carrying the student's averaged weights."""
        total = self.config.iterations if iterations is None else iterations
        while self.iteration < total:
            loss = self.step()
            if self.iteration % max(total // 10, 1) == 0:
                logger.info(f"DIRT-T f{self.student.index}: step {self.iteration}/{total} loss={loss:.6f}")
        params = self.student.classifier_parameters()
        refined = self.student.clone({id(p): self.ema.shadow[name] for name, p in params.items()})
        refined.eval()
        return refined


def ema_values_by_id(pair: HypothesisPair, ema: EmaState) -> Dict[int, np.ndarray]:
    return {id(p): ema.shadow[name] for name, p in pair.classifier_parameters().items()}


def dirtt_refine(hypothesis: Hypothesis, target: DomainDataset, config: DirtTConfig, train: TrainConfig,
                 initial: Optional[Dict[int, np.ndarray]] = None) -> Hypothesis:
    """Refine one hypothesis on unlabeled target data; ``iterations == 0`` returns an unchanged copy."""
    if len(target) == 0:
        raise DataError("dirtt_refine: empty target dataset")
    if config.iterations == 0:
        twin = hypothesis.clone(initial)
        twin.eval()
        return twin
    return DirtTRefiner(hypothesis, config, train, target.unlabeled(), initial).run()


def refine_pair(pair: HypothesisPair, target: DomainDataset, config: DirtTConfig, train: TrainConfig,
                initial: Optional[Dict[int, np.ndarray]] = None) -> HypothesisPair:
    """Refine each hypothesis on its own; the result no longer shares parameters between members."""
    refined = [dirtt_refine(m, target, config, train, initial) for m in pair.members]
    return HypothesisPair(refined, pair.sharing)


def report_refinement(before: HypothesisPair, after: HypothesisPair, target: DomainDataset) -> Dict[str, float]:
    out = {}
    if target.labels is None:
        return out
    for b, a in zip(before.members, after.members):
        out[f"before_{b.index}"] = accuracy(b, target)
        out[f"after_{a.index}"] = accuracy(a, target)
        logger.info(f"DIRT-T f{a.index}: target accuracy {out[f'before_{b.index}']:.4f} -> {out[f'after_{a.index}']:.4f}")
    return out
