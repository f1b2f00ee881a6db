"""Seeded training loop for the encoder/decoder on synthetic pairs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import TAPE, Tensor
from .data import SyntheticSpec, generate_dataset
from .errors import ContractError
from .matching import KeypointSet, match_pyramid
from .metrics import l2_coord_loss, merge_pck_reports, multiscale_loss, pck
from .model import CorrespondenceModel


@dataclass
class TrainSettings:
    epochs: int = 60
    learning_rate: float = 3e-3
    # Step-based decay: lr *= decay_factor every decay_step optimizer steps.
    decay_step: int = 400
    decay_factor: float = 0.95
    window_k: int = 9
    temperature: float = 0.1
    multiscale: bool = True
    # Train the decoder only, treating the encoder as a fixed feature
    # extractor (the usual pretrained-backbone regime).
    freeze_encoder: bool = False
    seed: int = 0


class Adam:
    """Elementwise Adam over a named parameter dict; fully deterministic.

    Tensors are immutable, so a step replaces updated entries of `params`
    in place (same dict object). Names in `frozen` keep their values and
    collect no optimizer state.
    """

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
                 frozen=()):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.frozen = frozenset(frozen)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()
                  if k not in self.frozen}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()
                  if k not in self.frozen}

    def step(self):
        self.t += 1
        b1t = 1 - self.beta1 ** self.t
        b2t = 1 - self.beta2 ** self.t
        for name in self.m:
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / b1t
            v_hat = self.v[name] / b2t
            new = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.params[name] = Tensor(new.astype(p.dtype), requires_grad=True)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _loss_strides(settings: TrainSettings):
    return (16, 8, 4) if settings.multiscale else (4,)


def train_step(model: CorrespondenceModel, src_img, tgt_img, annotation,
               optimizer: Adam, settings: TrainSettings) -> float:
    """One pair: forward both images, match, backprop the coordinate loss."""
    pair = annotation.masked()
    src_pyr = model.forward(src_img)
    tgt_pyr = model.forward(tgt_img)
    preds = match_pyramid(src_pyr, tgt_pyr, pair.src,
                          k=settings.window_k, temperature=settings.temperature)
    loss = multiscale_loss(preds, pair.tgt, strides=_loss_strides(settings))
    optimizer.zero_grad()
    ad.backward(loss)
    optimizer.step()
    return loss.item()


def evaluate_pck(model: CorrespondenceModel, pairs, alpha: float, stride: int = 4,
                 k: int = 9, temperature: float = 0.05, reference: str = "image"):
    """Aggregate PCK of stride-`stride` predictions scaled into pixels."""
    reports = []
    with TAPE.paused():
        for src_img, tgt_img, annotation in pairs:
            pair = annotation.masked()
            src_pyr = model.forward(src_img)
            tgt_pyr = model.forward(tgt_img)
            preds = match_pyramid(src_pyr, tgt_pyr, pair.src,
                                  k=k, temperature=temperature)
            pred_px = preds[stride].final * stride
            reports.append(pck(pred_px, pair.tgt, alpha, reference))
    return merge_pck_reports(reports)


def train(model: CorrespondenceModel, pairs, settings: TrainSettings,
          eval_pairs=None, eval_alpha: float = 0.1, log=None):
    """Train in place; returns a per-epoch log of loss (and PCK if evaluated).

    The pair order is fixed (no shuffling) so runs are reproducible for a
    given seed; randomness lives entirely in parameter init and data
    generation.
    """
    if not pairs:
        raise ContractError("training needs at least one pair")
    frozen = ()
    if settings.freeze_encoder:
        frozen = tuple(n for n in model.params if n.startswith("enc."))
    optimizer = Adam(model.params, settings.learning_rate, frozen=frozen)
    history = []
    step = 0
    lr = settings.learning_rate
    for epoch in range(1, settings.epochs + 1):
        losses = []
        for src_img, tgt_img, annotation in pairs:
            optimizer.lr = lr
            losses.append(train_step(model, src_img, tgt_img, annotation,
                                     optimizer, settings))
            step += 1
            if settings.decay_step > 0 and step % settings.decay_step == 0:
                lr *= settings.decay_factor
        entry = {"epoch": epoch, "step": step, "lr": lr,
                 "loss": float(np.mean(losses))}
        if eval_pairs is not None:
            entry["pck"] = evaluate_pck(
                model, eval_pairs, eval_alpha,
                k=settings.window_k, temperature=settings.temperature,
            ).aggregate
        history.append(entry)
        if log is not None:
            log(entry)
    return history
