"""
Training runs: sample parameters, build the objective, iterate the optimizer and
record metrics every ``metric_every`` epochs (and at epoch 0 and the last epoch).

Seeds: training parameters use ``seed``, test parameters ``seed + 1``, the
network initialization ``seed`` again. One run is sequential; several runs can
share a process pool, each writing to its own directory.
"""

import logging
import os
import time
from multiprocessing import Pool
from typing import Optional

import numpy as np

from surrogate_services.errors import UsageError
from surrogate_services.experiments import reporting
from surrogate_services.experiments.sampling import (compute_mre_mse, reference_solutions, sample_parameters,
                                                     zero_reference_count)
from surrogate_services.experiments.schemas import ExperimentConfig, MetricsRecord, OptimizerName, RunReport
from surrogate_services.networks.checkpoint import save_checkpoint
from surrogate_services.networks.resnet import build_network
from surrogate_services.numerics.precision import is_finite
from surrogate_services.training import optim
from surrogate_services.training.objective import SurrogateObjective

logger = logging.getLogger(__name__)


class _Trainer:
    """Holds optimizer state between epochs for one configuration."""

    def __init__(self, config: ExperimentConfig, objective: SurrogateObjective, theta: np.ndarray):
        self.config = config
        self.objective = objective
        section = config.optimizer
        kind = config.run.kind
        self.name = section.name
        self.schedule = section.schedule(kind)
        self.adam = optim.AdamState.zeros(theta, section.adam_eps(kind), section.beta1, section.beta2)
        self.lbfgs = section.lbfgs_state(kind)
        self.ngd = section.ngd_config(kind)

    def epoch(self, t: int, theta: np.ndarray) -> optim.StepOutcome:
        if self.name is OptimizerName.lbfgs:
            return optim.lbfgs_epoch(self.lbfgs, self.objective.loss_and_grad, theta)
        if self.name is OptimizerName.ngd:
            return optim.ngd_step(self.ngd, self.objective, None, theta)
        loss, grad = self.objective.loss_and_grad(theta)
        lr = optim.cosine_lr(self.schedule, t)
        if self.name is OptimizerName.adam:
            new_theta = optim.adam_step(self.adam, theta, grad, lr)
        else:
            new_theta = optim.sgd_step(theta, grad, lr)
        return optim.StepOutcome(theta=new_theta, loss=loss, grad=grad)


def _measure(objective: SurrogateObjective, theta: np.ndarray, y_test: np.ndarray, references: list,
             epoch: int, started: float) -> MetricsRecord:
    train_loss = objective.loss(theta)
    nodal = objective.predict_nodal(theta, y_test)
    with np.errstate(over="ignore", invalid="ignore"):
        test_loss = objective.test_loss(theta, y_test, nodal=nodal)
        mre, mse = compute_mre_mse(nodal, references)
    return MetricsRecord(epoch=epoch, train_loss=train_loss, test_loss=test_loss, mre=mre, mse=mse,
                         wall_time=time.perf_counter() - started)


def run_training(config: ExperimentConfig, output_dir: Optional[str] = None) -> RunReport:
    """
    Trains one surrogate and writes ``metrics.csv``, ``report.json`` and
    ``checkpoint.npz`` to the run directory.

    A non-finite training loss or parameter vector ends the run early; the report
    is then marked diverged and the metrics recorded so far are kept.
    """
    directory = output_dir or config.output_path()
    run = config.run
    dtype = run.kind.dtype
    arch = config.architecture()
    network = build_network(arch)
    logger.info("run %s: %s, %s, %s, %s, J=%d, %d parameters, %d epochs -> %s", run.name, config.optimizer.name.value,
                run.preconditioning.value, run.formulation.value, run.precision, run.J, network.param_count,
                run.epochs, directory)

    y_train = sample_parameters(config.data.k_train, run.seed)
    y_test = sample_parameters(config.data.n_test, run.seed + 1)
    references = reference_solutions(y_test, run.J, run.formulation, config.data.f)
    objective = SurrogateObjective(network, run.preconditioning, y_train, f=config.data.f)
    theta = network.init_params(run.seed, dtype=dtype)
    trainer = _Trainer(config, objective, theta)

    report = RunReport(config=config, parameter_count=network.param_count)
    excluded = zero_reference_count(references)
    if excluded:
        report.events.append(f"{excluded} test reference(s) with zero norm left out of the MRE")
    started = time.perf_counter()
    report.records.append(_measure(objective, theta, y_test, references, 0, started))
    completed = 0
    for t in range(run.epochs):
        outcome = trainer.epoch(t, theta)
        report.events.extend(f"epoch {t + 1}: {e}" for e in outcome.events)
        if not np.isfinite(outcome.loss) or not is_finite(outcome.theta):
            report.status = "diverged"
            report.events.append(f"epoch {t + 1}: training diverged (loss {outcome.loss})")
            logger.warning("run %s diverged at epoch %d", run.name, t + 1)
            break
        theta = outcome.theta
        epoch = completed = t + 1
        if epoch % run.metric_every == 0 or epoch == run.epochs:
            record = _measure(objective, theta, y_test, references, epoch, started)
            report.records.append(record)
            logger.info("run %s epoch %d: train %.3e test %.3e MRE %.3e MSE %.3e", run.name, epoch,
                        record.train_loss, record.test_loss, record.mre, record.mse)
    report.events.extend(objective.events)

    report.metrics_csv = reporting.write_metrics(report, directory)
    report.checkpoint = save_checkpoint(os.path.join(directory, reporting.CHECKPOINT_FILE), arch, theta,
                                        seed=run.seed, precision=run.precision,
                                        preconditioning=run.preconditioning.value,
                                        epochs_completed=completed)
    reporting.write_report(report, directory)
    logger.info("run %s %s after %.1fs", run.name, report.status, time.perf_counter() - started)
    return report


def _run_one(job: tuple) -> RunReport:
    config, output_dir = job
    return run_training(config, output_dir)


def run_many(configs: list, workers: int = 1, output_root: Optional[str] = None) -> list:
    """Runs independent configurations, in a process pool when ``workers > 1``."""
    if workers < 1:
        raise UsageError(f"workers must be >= 1, got {workers}")
    jobs = [(c, os.path.join(output_root, c.run.name) if output_root else None) for c in configs]
    targets = [job[1] or job[0].output_path() for job in jobs]
    if len(set(targets)) != len(targets):
        raise UsageError("runs must write to distinct directories; give each config its own [run] name")
    if workers == 1 or len(jobs) == 1:
        return [_run_one(job) for job in jobs]
    with Pool(processes=min(workers, len(jobs))) as pool:
        return pool.map(_run_one, jobs)
