"""
SGD training over virtual batches.

Every full batch of cfg.batch_size samples is split into virtual batches of
cfg.k samples. Each virtual batch is blinded, run forward and backward, and
its decoded gradients are sealed into a page the untrusted context holds.
Once the full batch is done the trusted context opens the pages, averages
them and the untrusted context applies one weight update.

"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from masking.sampling import philox
from pipeline.contexts import TrustedContext, UntrustedContext
from pipeline.engine import backward_plain, backward_split, forward_plain, forward_split, sgd_step
from pipeline.integrity import OK, VIOLATION
from pipeline.losses import accuracy, get_loss
from tensors.exceptions import ParameterError, ShapeError
from tensors.ops import as_tensor, freeze

logger = logging.getLogger(__name__)

ENGINES = ('split', 'plain')
OFF = 'off'


@dataclass(frozen=True)
class TrainConfig:
    eta: float
    k: int
    epochs: int
    loss: str = 'softmax_cross_entropy'
    seed: int = 0
    integrity: bool = False
    threshold: float = 1e-6
    batch_size: int = None
    noise_mean: float = None
    noise_variance: float = None
    workers: int = None
    shuffle: bool = True

    def __post_init__(self):
        if not self.eta > 0:
            raise ParameterError("Learning rate must be positive, got %r." % self.eta)
        if self.k < 1:
            raise ParameterError("Virtual batch size must be at least 1, got %r." % self.k)
        if self.epochs < 0:
            raise ParameterError("Epoch count must not be negative.")
        if not self.threshold > np.finfo(np.float64).eps:
            raise ParameterError("Integrity threshold %r is below machine precision." % self.threshold)
        if self.batch_size is not None and (self.batch_size < self.k or self.batch_size % self.k):
            raise ParameterError("Batch size %r is not a multiple of the virtual batch size %d." % (self.batch_size, self.k))
        get_loss(self.loss)

    @property
    def full_batch(self):
        return self.batch_size or self.k


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: tuple
    labels: tuple

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ShapeError("Dataset has %d inputs but %d labels." % (len(self.inputs), len(self.labels)))
        if len({as_tensor(x).shape for x in self.inputs}) > 1:
            raise ShapeError("Dataset inputs must share one shape.")

    def __len__(self):
        return len(self.inputs)

    @property
    def input_shape(self):
        return as_tensor(self.inputs[0]).shape

    def batch(self, indices):
        return [self.inputs[i] for i in indices], [self.labels[i] for i in indices]


def _chunks(items, size):
    return [items[start:start + size] for start in range(0, len(items), size)]


def _grad_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(grad))) for grad in grads.values()))


def _plain_full_batch(model, dataset, virtual_batches, loss_fn):
    total, losses = {}, []
    for indices in virtual_batches:
        inputs, labels = dataset.batch(indices)
        logits, cache = forward_plain(model, inputs)
        loss, deltas = loss_fn(logits, labels)
        losses.append((loss, len(indices)))
        for index, grad in backward_plain(model, cache, deltas).items():
            total[index] = total.get(index, 0.0) + len(indices) * grad
    count = sum(size for _, size in losses)
    return {index: freeze(grad / count) for index, grad in total.items()}, losses


def _split_full_batch(model, dataset, virtual_batches, loss_fn, trusted, untrusted):
    losses = []
    for indices in virtual_batches:
        inputs, labels = dataset.batch(indices)
        logits, stored = forward_split(model, inputs, trusted, untrusted, training=True)
        loss, deltas = loss_fn(logits, labels)
        losses.append((loss, len(indices)))
        grads = backward_split(model, stored, deltas, trusted, untrusted)
        untrusted.store_page(trusted.seal_page(grads, len(indices)))
    return trusted.aggregate_pages(untrusted.release_pages()), losses


def trusted_context(cfg):
    """
    The trusted context train() uses for cfg unless given one. Its seed is
    derived from cfg.seed independently of the shuffling order.

    """
    _, trusted_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    return TrustedContext(
        seed=trusted_seed,
        noise_mean=cfg.noise_mean,
        noise_variance=cfg.noise_variance,
        integrity=cfg.integrity,
        threshold=cfg.threshold,
    )


def train(model, dataset, cfg, engine='split', on_step=None, trusted=None, untrusted=None):
    """
    Trains model on dataset and returns the trained model and one metrics
    record per weight update. on_step(step, model) is called after every
    update. The split engine builds its own contexts unless given some.

    """
    if engine not in ENGINES:
        raise ParameterError("Unknown engine '%s'; expected one of %s." % (engine, ', '.join(ENGINES)))
    if not len(dataset):
        raise ParameterError("Cannot train on an empty dataset.")
    if len(dataset) % cfg.k:
        raise ParameterError("Dataset of %d samples does not split into virtual batches of %d." % (len(dataset), cfg.k))
    loss_fn = get_loss(cfg.loss)
    shuffle_seed, _ = np.random.SeedSequence(cfg.seed).spawn(2)
    order_rng = philox(shuffle_seed)
    if engine == 'split':
        if trusted is None:
            trusted = trusted_context(cfg)
        if untrusted is None:
            untrusted = UntrustedContext(model, workers=cfg.workers)
        untrusted.model = model

    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(dataset)) if cfg.shuffle else np.arange(len(dataset))
        for batch in _chunks(order, cfg.full_batch):
            virtual_batches = _chunks(batch, cfg.k)
            if engine == 'split':
                grads, losses = _split_full_batch(model, dataset, virtual_batches, loss_fn, trusted, untrusted)
                model = untrusted.apply_update(grads, cfg.eta)
                results = trusted.release_integrity_results()
                if not trusted.integrity:
                    integrity = OFF
                else:
                    integrity = OK if all(result.ok for result in results) else VIOLATION
            else:
                grads, losses = _plain_full_batch(model, dataset, virtual_batches, loss_fn)
                model = sgd_step(model, grads, cfg.eta)
                integrity = OFF
            step += 1
            record = {
                'step': step,
                'epoch': epoch,
                'loss': sum(loss * size for loss, size in losses) / sum(size for _, size in losses),
                'grad_norm': _grad_norm(grads),
                'integrity': integrity,
            }
            history.append(record)
            logger.info("step %(step)d epoch %(epoch)d loss %(loss).6g grad_norm %(grad_norm).6g integrity %(integrity)s", record)
            if on_step is not None:
                on_step(step, model)
    return model, history


def evaluate(model, dataset, loss='softmax_cross_entropy', k=None):
    """
    Plain-engine loss and accuracy over the whole dataset.

    """
    loss_fn = get_loss(loss)
    logits = []
    for indices in _chunks(list(range(len(dataset))), k or len(dataset)):
        outputs, _ = forward_plain(model, dataset.batch(indices)[0])
        logits.extend(outputs)
    value, _ = loss_fn(logits, list(dataset.labels))
    return value, accuracy(logits, list(dataset.labels))

