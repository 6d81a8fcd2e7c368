"""
Mini-batch training with Adam, early stopping on validation loss and a grid search
over the domain balancing weights.
"""
import contextlib
import csv
import json
import logging
import math
import pathlib
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from crossrec.errors import NonFiniteLossError
from crossrec.metrics import mrr
from crossrec.model import CrossDomainModel, Hyperparams, rank_targets, save_checkpoint

logger = logging.getLogger(__name__)

LAMBDA1_GRID = (0.2, 0.3, 0.4, 0.5)
LAMBDA2_GRID = (0.05, 0.1, 0.15, 0.2)
MODES = ("reference", "parallel")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_mrr: float


@dataclass
class TrainRunReport:
    """
    What happened during a training run. `best_epoch` is the epoch whose parameters
    were kept; `aborted` holds the error message when a non-finite loss stopped the run.
    """

    epochs: List[EpochRecord]
    stopping_epoch: int
    best_epoch: int
    best_valid_loss: float
    checkpoint_path: Optional[str] = None
    wall_clock_seconds: float = 0.0
    stopped_early: bool = False
    aborted: Optional[str] = None
    model: Optional[CrossDomainModel] = field(default=None, repr=False, compare=False)

    @property
    def best(self):
        return self.epochs[self.best_epoch - 1] if self.best_epoch else None

    def to_dict(self):
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "stopping_epoch": self.stopping_epoch,
            "best_epoch": self.best_epoch,
            "best_valid_loss": self.best_valid_loss,
            "checkpoint_path": self.checkpoint_path,
            "wall_clock_seconds": self.wall_clock_seconds,
            "stopped_early": self.stopped_early,
            "aborted": self.aborted,
        }

    def write_json(self, path):
        pathlib.Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "valid_loss", "valid_mrr"])
            writer.writeheader()
            for record in self.epochs:
                writer.writerow(asdict(record))


@contextlib.contextmanager
def thread_mode(mode="reference", threads=None):
    """
    Pins torch to one intra-op thread in reference mode. Parallel mode uses `threads`
    threads and its reductions are not bitwise reproducible.
    """
    if mode not in MODES:
        raise ValueError(f"`mode` must be one of {list(MODES)}, got '{mode}'.")
    previous = torch.get_num_threads()
    torch.set_num_threads(1 if mode == "reference" else (threads or previous))
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def compute_gradients(model: CrossDomainModel, users, reduction=None, training=False):
    """
    Exact gradients of the training objective over a batch of users.

    Arguments:
        model: a bound `CrossDomainModel`
        users: non-empty list of `UserSequences`
        reduction: `mean` or `sum` over users, defaults to the model's hyperparameters
        training: apply dropout

    Returns the loss and an ordered dictionary with a gradient for every entry of
    `model.registry()`. Parameters the objective does not touch get zeros.
    """
    if not users:
        raise ValueError("`compute_gradients` needs a non-empty batch of users.")
    model.zero_grad(set_to_none=True)
    loss = model.objective(users, training=training, reduction=reduction)
    if not torch.isfinite(loss):
        raise NonFiniteLossError("total", f"loss is {loss.item()}")
    loss.backward()
    grads = OrderedDict(
        (name, p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.registry().items()
    )
    return loss.detach(), grads


def make_optimizer(params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    params = list(params.values()) if isinstance(params, dict) else list(params)
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas), eps=eps)


def adam_step(params, grads, state=None, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """
    Applies one bias-corrected Adam update. `state` is the `torch.optim.Adam` that
    holds the moments and the step counter; one is created on the first call.

    Arguments:
        params: dictionary of name to trainable tensor, usually `model.registry()`
        grads: dictionary with a gradient for every name in `params`
        state: the optimizer returned by a previous call
        lr: learning rate
        betas: decay rates of the first and second moment
        eps: denominator offset

    Usage:

    ```python
    import torch
    from crossrec.training import adam_step

    w = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
    state = adam_step({"w": w}, {"w": torch.ones(1, dtype=torch.float64)})
    assert abs(w.item() + 1e-3) < 1e-9
    assert state.state[w]["step"] == 1
    ```
    """
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise ValueError(f"`grads` must match `params`, these names differ: {missing}.")
    if state is None:
        state = make_optimizer(params, lr=lr, betas=betas, eps=eps)
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"Gradient of `{name}` has shape {tuple(grads[name].shape)}, expected {tuple(p.shape)}.")
        p.grad = grads[name].detach().to(p.dtype).clone()
    state.step()
    return state


def validation_loss(model: CrossDomainModel, dataset, split="valid"):
    """
    Mean over users of `-log` of the normalised inference score of the held-out item.
    Users without history in a sequence the score reads are left out.
    """
    histories = {u: dataset.history(u, split) for u in dataset.users}
    targets = dataset.valid if split == "valid" else dataset.test
    scored = rank_targets(model, histories, targets, batch_size=model.hyper.batch_size)
    if not scored:
        logger.warning("no %s user has a history to rank, the validation loss is undefined", split)
        return math.inf, 0.0
    loss = math.fsum(-math.log(max(s.prob, 1e-12)) for s in scored) / len(scored)
    return loss, mrr([s.result for s in scored])


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(dataset, features, hyper: Hyperparams, out_dir=None, mode="reference", threads=None):
    """
    Trains a `CrossDomainModel` on the training sequences of a `DatasetSplit`.

    Users are shuffled every epoch with the run seed. After every epoch the validation
    loss is computed; the parameters of the best epoch are kept and training stops once
    `patience` epochs pass without improvement. A non-finite loss ends the run and the
    report carries the error.

    Arguments:
        dataset: the `DatasetSplit`
        features: the `FeatureSet` matching the dataset catalog
        hyper: the `Hyperparams`
        out_dir: when given, the best checkpoint is written to `checkpoint.bin` in it
        mode: `reference` or `parallel`
        threads: intra-op threads in parallel mode
    """
    started = time.perf_counter()
    with thread_mode(mode, threads):
        torch.manual_seed(hyper.seed)
        model = CrossDomainModel(hyper, dataset.item_catalog.sizes, len(features.vocabulary)).bind(features)
        optimizer = make_optimizer(model.registry(), lr=hyper.lr, betas=hyper.betas, eps=hyper.eps)
        users = dataset.users
        rng = np.random.default_rng(hyper.seed)
        records, aborted = [], None
        best_loss, best_epoch, best_state, since_best = math.inf, 0, _snapshot(model), 0
        stopped_early = False
        for epoch in range(1, hyper.max_epochs + 1):
            model.train()
            order = rng.permutation(len(users))
            total = 0.0
            try:
                for start in range(0, len(users), hyper.batch_size):
                    batch = [dataset.train[users[i]] for i in order[start : start + hyper.batch_size]]
                    optimizer.zero_grad(set_to_none=True)
                    loss = model.objective(batch, training=True)
                    if not torch.isfinite(loss):
                        raise NonFiniteLossError("total", f"loss is {loss.item()} in epoch {epoch}")
                    loss.backward()
                    optimizer.step()
                    total += loss.item() * (len(batch) if hyper.reduction == "mean" else 1)
            except NonFiniteLossError as err:
                logger.error("aborting training: %s", err)
                aborted = str(err)
                break
            model.eval()
            valid_loss, valid_mrr = validation_loss(model, dataset)
            records.append(EpochRecord(epoch, total / len(users), valid_loss, valid_mrr))
            logger.info(
                "epoch %d train_loss=%.5f valid_loss=%.5f valid_mrr=%.4f",
                epoch,
                records[-1].train_loss,
                valid_loss,
                valid_mrr,
            )
            if valid_loss < best_loss:
                best_loss, best_epoch, best_state, since_best = valid_loss, epoch, _snapshot(model), 0
            else:
                since_best += 1
                if since_best >= hyper.patience:
                    logger.info("early stop after epoch %d, best epoch %d", epoch, best_epoch)
                    stopped_early = True
                    break
        model.load_state_dict(best_state)
        model.eval()
        checkpoint = None
        if out_dir is not None:
            checkpoint = str(pathlib.Path(out_dir) / "checkpoint.bin")
            save_checkpoint(model, checkpoint)
    return TrainRunReport(
        epochs=records,
        stopping_epoch=len(records),
        best_epoch=best_epoch,
        best_valid_loss=best_loss,
        checkpoint_path=checkpoint,
        wall_clock_seconds=time.perf_counter() - started,
        stopped_early=stopped_early,
        aborted=aborted,
        model=model,
    )


@dataclass
class GridSearchResult:
    best: Tuple[float, float]
    scores: Dict[Tuple[float, float], float]

    def rows(self):
        return [(l1, l2, score) for (l1, l2), score in sorted(self.scores.items())]


def grid_search(dataset, features, hyper: Hyperparams, lambda1_grid=LAMBDA1_GRID, lambda2_grid=LAMBDA2_GRID, **kwargs):
    """
    Trains one run per `(l1, l2)` cell with the seed of `hyper` and keeps the cell with
    the best validation MRR at its best epoch. Ties go to the smaller cell.

    Arguments:
        dataset: the `DatasetSplit`
        features: the `FeatureSet`
        hyper: template hyperparameters, only `lambdas` changes per cell
        lambda1_grid: candidate values of `l1`
        lambda2_grid: candidate values of `l2`
        kwargs: passed on to `train`
    """
    if not lambda1_grid or not lambda2_grid:
        raise ValueError("`grid_search` needs non-empty grids.")
    scores = {}
    best, best_score = None, -math.inf
    for cell in sorted((float(a), float(b)) for a in lambda1_grid for b in lambda2_grid):
        report = train(dataset, features, replace(hyper, lambdas=cell), **kwargs)
        score = report.best.valid_mrr if report.best else 0.0
        scores[cell] = score
        logger.info("grid cell lambdas=%s valid_mrr=%.4f", cell, score)
        if score > best_score:
            best, best_score = cell, score
    return GridSearchResult(best=best, scores=scores)
