"""Training loop: per-pass thresholds, AUM updates, masked losses, optimizer steps and artifacts."""

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import structlog

from .aum import AumBank, margin_matrix
from .config import RunConfig, derive_seeds, dump_config
from .data import DatasetBundle, augment, bundle_from_config, save_bundle
from .errors import InvalidConfigError, MarginMatchError, OutOfOrderUpdateError
from .losses import combine_grads, supervised_loss, total_loss, unlabeled_loss
from .metrics import PassEvaluator
from .models import AugmentationKind, PassMetrics, PolicyVariant, ThresholdState
from .network import ClassifierParams, OptimizerState, cosine_lr, forward, init_params, sgd_step
from .policy import DecisionBatch, PolicyEvidence, decide_arrays
from .stats import emit_pass_metrics, emit_run_event, get_stats_client
from .storage import (
    JsonlWriter,
    RunCheckpoint,
    TraceFile,
    decision_payloads,
    save_run_checkpoint,
    write_trace,
)
from .thresholds import ThresholdSchedule

logger = structlog.get_logger(__name__)

METRICS_FILE = "metrics.jsonl"
DECISIONS_FILE = "decisions.jsonl"
TRACE_FILE = "trace.bin"
CHECKPOINT_FILE = "checkpoint.bin"
CONFIG_FILE = "config.yaml"
BUNDLE_DIR = "bundle"

# Augmentation stream codes, mixed into the per-batch generator seed.
_LABELED_WEAK, _UNLABELED_WEAK, _UNLABELED_STRONG, _SUPERVISED_REFRESH = range(4)


@dataclass
class RunArtifacts:
    """Everything a finished run leaves behind, in memory and on disk."""

    config: RunConfig
    config_hash: str
    seeds: dict[str, int]
    params: ClassifierParams
    metrics: list[PassMetrics]
    thresholds: list[ThresholdState]
    unlabeled_bank: AumBank
    supervised_bank: AumBank
    output_dir: Path
    files: dict[str, Path] = field(default_factory=dict)

    @property
    def final_test_error(self) -> float:
        return self.metrics[-1].test_error


def supervised_weights(bundle: DatasetBundle, weighting: str) -> np.ndarray:
    """
    Sampling probabilities over labeled examples followed by threshold samples.

    ``balanced`` gives threshold samples a total share of 1/(C+1); ``uniform`` treats every
    example alike.
    """
    n_labeled, n_threshold = len(bundle.labeled), len(bundle.threshold)
    total = n_labeled + n_threshold
    if weighting == "uniform" or n_threshold == 0 or n_labeled == 0:
        return np.full(total, 1.0 / total)
    share = 1.0 / (bundle.num_classes + 1)
    return np.concatenate(
        [np.full(n_labeled, (1.0 - share) / n_labeled), np.full(n_threshold, share / n_threshold)]
    )


def lockstep_counts(evidence: PolicyEvidence) -> dict[str, int]:
    """Selected counts of all three policies on one batch, plus subset-chain violations."""
    selected = {v: decide_arrays(v, evidence).selected for v in PolicyVariant}
    fix, flex, margin = (
        selected[PolicyVariant.FIXMATCH],
        selected[PolicyVariant.FLEXMATCH],
        selected[PolicyVariant.MARGINMATCH],
    )
    counts = {v.value: int(np.count_nonzero(s)) for v, s in selected.items()}
    counts["violations"] = int(np.count_nonzero(margin & ~flex) + np.count_nonzero(fix & ~flex))
    return counts


class Trainer:
    """
    Runs one configured experiment.

    A pass is one traversal of the unlabeled pool in ``ceil(|U| / (nu*B))`` batches. The
    requested step count is rounded up to whole passes.
    """

    def __init__(
        self,
        config: RunConfig,
        bundle: Optional[DatasetBundle] = None,
        output_dir: Optional[str | Path] = None,
    ):
        self.config = config
        self.config_hash = config.config_hash()
        self.seeds = derive_seeds(config.seed)
        self.bundle = bundle if bundle is not None else bundle_from_config(config, self.seeds)
        self.output_dir = Path(output_dir) if output_dir is not None else config.output_path()
        if self.bundle.num_classes != config.data.num_classes:
            raise InvalidConfigError("bundle class count does not match data.num_classes")
        if len(self.bundle.unlabeled) == 0:
            raise InvalidConfigError("the unlabeled pool is empty")
        if len(self.bundle.labeled) + len(self.bundle.threshold) == 0:
            raise InvalidConfigError("no labeled examples or threshold samples")

        self.num_classes = self.bundle.num_classes
        self.num_outputs = self.num_classes + 1
        self.batches_per_pass = math.ceil(len(self.bundle.unlabeled) / config.unlabeled_batch_size)
        self.passes = math.ceil(config.total_steps / self.batches_per_pass)
        self.effective_steps = self.passes * self.batches_per_pass

        self.params = init_params(
            self.bundle.feature_dim,
            config.model.hidden_widths,
            self.num_outputs,
            np.random.default_rng(self.seeds["init"]),
            config.model.activation,
        )
        self.optimizer = OptimizerState.for_params(
            self.params,
            self.effective_steps,
            eta0=config.model.learning_rate,
            momentum=config.model.momentum,
            weight_decay=config.model.weight_decay,
        )
        self.schedule = ThresholdSchedule.from_config(config)
        self.evaluator = PassEvaluator(self.bundle)
        self.pool = self.bundle.supervised_pool()
        self.pool_weights = supervised_weights(self.bundle, config.data.supervised_weighting)
        self.unlabeled_bank = AumBank(self.bundle.unlabeled.ids, self.num_outputs)
        self.supervised_bank = AumBank(self.pool.ids, self.num_outputs)
        self.sampling_rng = np.random.default_rng(self.seeds["sampling"])
        self.stats = get_stats_client(config.stats)
        self.log = logger.bind(policy=config.policy.value, config_hash=self.config_hash[:12])

    def _aug_rng(self, t: int, stream: int, batch: int) -> np.random.Generator:
        return np.random.default_rng([self.seeds["augmentation"], t, stream, batch])

    def _threshold_aums(self) -> np.ndarray:
        return self.supervised_bank.aum[len(self.bundle.labeled) :, self.num_classes]

    def _should_log_decisions(self, t: int) -> bool:
        interval = self.config.outputs.decision_log_interval
        return t == self.passes or (t - 1) % interval == 0

    def _refresh_supervised_bank(self, t: int) -> Optional[np.ndarray]:
        """Fold this pass's margins of labeled examples and threshold samples into their bank."""
        x = augment(
            self.pool.features,
            self.config.augmentation,
            AugmentationKind.WEAK,
            self._aug_rng(t, _SUPERVISED_REFRESH, 0),
        )
        logits = forward(self.params, x)
        self.supervised_bank.update(
            np.arange(len(self.pool)), margin_matrix(logits), t, self.config.delta
        )
        return logits[len(self.bundle.labeled) :]

    def _aum_summaries(self) -> tuple[Optional[float], Optional[float]]:
        n_labeled = len(self.bundle.labeled)
        labeled = threshold = None
        if n_labeled:
            rows = np.arange(n_labeled)
            labeled = float(self.supervised_bank.aum_at(rows, self.bundle.labeled.labels).mean())
        if len(self.bundle.threshold):
            threshold = float(self._threshold_aums().mean())
        return labeled, threshold

    def _run_pass(
        self,
        t: int,
        thresholds: ThresholdState,
        decisions_out: Optional[JsonlWriter],
        trace_parts: Optional[list],
    ) -> tuple[PassMetrics, np.ndarray]:
        cfg = self.config
        unlabeled = self.bundle.unlabeled
        batch = cfg.unlabeled_batch_size
        order = self.sampling_rng.permutation(len(unlabeled))
        confidences = np.empty((len(unlabeled), self.num_classes))
        decided: list[DecisionBatch] = []
        losses = np.zeros((self.batches_per_pass, 3))
        lockstep: Optional[dict[str, int]] = {} if cfg.outputs.lockstep else None
        lr = cfg.model.learning_rate

        for b in range(self.batches_per_pass):
            rows = order[b * batch : (b + 1) * batch]
            picks = self.sampling_rng.choice(
                len(self.pool), size=cfg.batch_size, replace=True, p=self.pool_weights
            )
            x_labeled = augment(
                self.pool.features[picks],
                cfg.augmentation,
                AugmentationKind.WEAK,
                self._aug_rng(t, _LABELED_WEAK, b),
            )
            x_weak = augment(
                unlabeled.features[rows],
                cfg.augmentation,
                AugmentationKind.WEAK,
                self._aug_rng(t, _UNLABELED_WEAK, b),
            )
            x_strong = augment(
                unlabeled.features[rows],
                cfg.augmentation,
                AugmentationKind.STRONG,
                self._aug_rng(t, _UNLABELED_STRONG, b),
            )

            weak_logits = forward(self.params, x_weak)
            self.unlabeled_bank.update(rows, margin_matrix(weak_logits), t, cfg.delta)
            aum_rows = self.unlabeled_bank.aum[rows]
            sup = supervised_loss(self.params, x_labeled, self.pool.labels[picks])
            unl = unlabeled_loss(
                self.params,
                weak_logits,
                x_strong,
                unlabeled.ids[rows],
                thresholds,
                cfg.policy,
                aum=aum_rows,
                renormalize=cfg.gating.renormalize_confidence,
                reduction=cfg.gating.unlabeled_loss_reduction,
                batch_size=cfg.unlabeled_batch_size,
            )
            probs = unl.probs
            confidences[rows] = probs
            decided.append(unl.decisions)
            if lockstep is not None:
                evidence = PolicyEvidence(unlabeled.ids[rows], probs, thresholds, aum_rows)
                for key, count in lockstep_counts(evidence).items():
                    lockstep[key] = lockstep.get(key, 0) + count
            if trace_parts is not None:
                trace_parts.append((unlabeled.ids[rows], weak_logits))

            lr = cosine_lr(self.optimizer.step, self.optimizer.total_steps, self.optimizer.eta0)
            losses[b] = (sup.value, unl.value, total_loss(sup.value, unl.value, cfg.lambda_u))
            grads = combine_grads(sup.grads, unl.grads, cfg.lambda_u)
            self.params, self.optimizer = sgd_step(self.params, grads, self.optimizer, lr)

        threshold_logits = self._refresh_supervised_bank(t)
        if trace_parts is not None and len(self.bundle.threshold):
            trace_parts.append((self.bundle.threshold.ids, threshold_logits))

        if np.any(self.unlabeled_bank.update_count != t):
            raise OutOfOrderUpdateError(
                f"pass {t}: some unlabeled trackers were not updated exactly once"
            )

        decisions = DecisionBatch(
            example_ids=np.concatenate([d.example_ids for d in decided]),
            pseudo_labels=np.concatenate([d.pseudo_labels for d in decided]),
            confidences=np.concatenate([d.confidences for d in decided]),
            conf_pass=np.concatenate([d.conf_pass for d in decided]),
            aum_pass=np.concatenate([d.aum_pass for d in decided]),
        )
        if decisions_out is not None and self._should_log_decisions(t):
            for payload in decision_payloads(t, cfg.policy.value, decisions):
                decisions_out.write("decision", payload)

        selected_count = int(np.count_nonzero(decisions.selected))
        labeled_aum, threshold_aum = self._aum_summaries()
        sup_mean, unl_mean, total_mean = losses.mean(axis=0)
        metrics = PassMetrics(
            pass_index=t,
            mask_rate=self.evaluator.mask_rate(selected_count),
            impurity=self.evaluator.impurity(decisions),
            test_error=self.evaluator.test_error(self.params),
            per_class_thresholds=thresholds.per_class,
            gamma=thresholds.gamma,
            selected_count=selected_count,
            masked_count=len(decisions) - selected_count,
            supervised_loss=float(sup_mean),
            unsupervised_loss=float(unl_mean),
            total_loss=float(total_mean),
            learning_rate=float(lr),
            labeled_aum=labeled_aum,
            threshold_aum=threshold_aum,
            lockstep=lockstep,
        )
        return metrics, confidences

    def _checkpoint(self, path: Path, t: int) -> None:
        save_run_checkpoint(
            path,
            RunCheckpoint(
                params=self.params,
                optimizer=self.optimizer,
                unlabeled_bank=self.unlabeled_bank,
                supervised_bank=self.supervised_bank,
                meta={"pass_index": t, "config_hash": self.config_hash, "seed": self.config.seed},
            ),
        )

    def _write_trace(self, path: Path, trace_parts: list) -> None:
        ids, passes, logits = [], [], []
        for t, parts in enumerate(trace_parts, start=1):
            for part_ids, part_logits in parts:
                ids.append(part_ids)
                passes.append(np.full(part_ids.size, t, dtype=np.int64))
                logits.append(part_logits)
        all_ids = np.concatenate(ids)
        trace = TraceFile.from_arrays(
            all_ids,
            np.concatenate(passes),
            np.concatenate(logits),
            self.num_classes,
            gold_labels=self.evaluator.gold_for(all_ids),
            threshold_ids=self.bundle.threshold.ids,
            config_hash=self.config_hash,
        )
        write_trace(trace, path)

    def run(self) -> RunArtifacts:
        """
        Train for the configured number of passes and write all artifacts.

        Raises:
            MarginMatchError: Any module failure, after an error record has been flushed to
                the metrics stream
        """
        cfg = self.config
        out = self.output_dir
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "config": out / CONFIG_FILE,
            "metrics": out / METRICS_FILE,
            "decisions": out / DECISIONS_FILE,
            "checkpoint": out / CHECKPOINT_FILE,
            "bundle": out / BUNDLE_DIR,
        }
        if cfg.outputs.record_trace:
            files["trace"] = out / TRACE_FILE
        dump_config(cfg, files["config"])
        save_bundle(self.bundle, files["bundle"], self.config_hash)

        provenance = {"config_hash": self.config_hash, "seed": cfg.seed, "policy": cfg.policy.value}
        metrics_out = JsonlWriter(
            files["metrics"],
            "metrics",
            **provenance,
            seeds=self.seeds,
            passes=self.passes,
            batches_per_pass=self.batches_per_pass,
            effective_total_steps=self.effective_steps,
            counts=self.bundle.counts(),
        )
        decisions_out = JsonlWriter(
            files["decisions"],
            "decisions",
            **provenance,
            interval=cfg.outputs.decision_log_interval,
        )
        history: list[PassMetrics] = []
        thresholds_history: list[ThresholdState] = []
        trace_parts: Optional[list] = [] if cfg.outputs.record_trace else None
        previous_confidences: Optional[np.ndarray] = None
        started = time.time()
        t = 0

        self.log.info(
            "run_started",
            passes=self.passes,
            batches_per_pass=self.batches_per_pass,
            effective_total_steps=self.effective_steps,
            **self.bundle.counts(),
        )
        emit_run_event(self.stats, cfg.policy.value, "started")
        try:
            for t in range(1, self.passes + 1):
                thresholds = self.schedule.state_for_pass(
                    t, previous_confidences, self._threshold_aums()
                )
                thresholds_history.append(thresholds)
                pass_parts: Optional[list] = [] if trace_parts is not None else None
                metrics, previous_confidences = self._run_pass(
                    t, thresholds, decisions_out, pass_parts
                )
                if trace_parts is not None:
                    trace_parts.append(pass_parts)
                history.append(metrics)
                metrics_out.write("pass", metrics.model_dump(mode="json"))
                metrics_out.flush()
                emit_pass_metrics(self.stats, cfg.policy.value, metrics)
                self.log.info(
                    "pass_completed",
                    pass_index=t,
                    mask_rate=round(metrics.mask_rate, 4),
                    impurity=metrics.impurity,
                    test_error=metrics.test_error,
                    gamma=metrics.gamma,
                )
                interval = cfg.outputs.checkpoint_interval
                if interval and t % interval == 0:
                    self._checkpoint(out / f"checkpoint-pass-{t:05d}.bin", t)

            self._checkpoint(files["checkpoint"], self.passes)
            if trace_parts is not None:
                self._write_trace(files["trace"], trace_parts)
        except MarginMatchError as e:
            metrics_out.write(
                "error", {"pass_index": t, "error_type": type(e).__name__, "message": str(e)}
            )
            metrics_out.flush()
            self.log.error("run_failed", pass_index=t, error=str(e))
            emit_run_event(self.stats, cfg.policy.value, "failed")
            raise
        finally:
            metrics_out.close()
            decisions_out.close()

        emit_run_event(self.stats, cfg.policy.value, "completed")
        self.log.info(
            "run_completed",
            final_test_error=history[-1].test_error,
            seconds=round(time.time() - started, 2),
        )
        return RunArtifacts(
            config=cfg,
            config_hash=self.config_hash,
            seeds=self.seeds,
            params=self.params,
            metrics=history,
            thresholds=thresholds_history,
            unlabeled_bank=self.unlabeled_bank,
            supervised_bank=self.supervised_bank,
            output_dir=out,
            files=files,
        )


def run(
    config: RunConfig,
    bundle: Optional[DatasetBundle] = None,
    output_dir: Optional[str | Path] = None,
) -> RunArtifacts:
    """Train one configured experiment end to end."""
    return Trainer(config, bundle=bundle, output_dir=output_dir).run()
