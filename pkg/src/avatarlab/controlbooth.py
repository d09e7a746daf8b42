"""Few-shot personalization with condition prior preservation.

A frozen copy of the base denoiser generates class images under class
prompts and pooled poses; fine-tuning then minimizes the denoising loss on
the subject examples plus ``lambda_cppl`` times the same loss on those
prior examples.

Losses use the noise-prediction form ``|eps_hat - eps|^2``. The image-space
form ``|D(x_t) - x0|^2`` used by x0-predicting models equals it up to the
per-timestep factor ``(sigma_t / alpha_t)^2``, which is folded into the
timestep weighting.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .errors import DomainError, NumericAbort
from .guidance import SUBJECT_TOKEN, Denoiser, ancestral_sample

log = logging.getLogger(__name__)

CLASS_PROMPT = ("a", "photo", "of", "a", "person")


@dataclass
class BoothConfig:
    lambda_cppl: float = 1.0
    n_prior: int = 100
    steps: int = 1500
    lr: float = 5e-4
    lr_text: float = 5e-3
    batch_size: int = 6
    prior_sampling_steps: int = 50
    seed: int = 0
    class_prompt: tuple = CLASS_PROMPT
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.lambda_cppl < 0:
            raise DomainError("lambda_cppl must be nonnegative")
        if self.n_prior < 0:
            raise DomainError("n_prior must be nonnegative")


@dataclass
class FewShotExample:
    image: torch.Tensor  # (3, H, W) in [-1, 1], background already masked
    pose_image: torch.Tensor  # (3, H, W) in [0, 1]
    tokens: list  # token ids, subject token included


@dataclass
class PriorExample:
    image: torch.Tensor
    pose_image: torch.Tensor
    tokens: list
    seed: int


def fewshot_from_examples(examples, vocab, dtype=torch.float64):
    """Convert :class:`avatarlab.data.Example` records into training tuples."""
    out = []
    for ex in examples:
        img = torch.from_numpy(np.ascontiguousarray(ex.image.transpose(2, 0, 1))).to(dtype) * 2 - 1
        pose = torch.from_numpy(np.ascontiguousarray(ex.pose.transpose(2, 0, 1))).to(dtype)
        out.append(FewShotExample(img, pose, vocab.encode(ex.caption)))
    return out


def _stack(batch):
    images = torch.stack([b.image for b in batch])
    poses = torch.stack([b.pose_image for b in batch])
    return images, poses, [list(b.tokens) for b in batch]


def generate_prior_set(frozen: Denoiser, class_tokens, poses, n_prior, rng, steps=50, size=None):
    """Sample ``n_prior`` class images from the frozen model under pooled poses.

    ``poses`` is a list of ``(3, H, W)`` pose images in ``[0, 1]``. Each
    example records the integer seed that reproduces it on its own.
    """
    if n_prior == 0:
        return []
    if not poses:
        raise DomainError("empty pose pool")
    dtype = next(iter(frozen.parameters()), torch.zeros((), dtype=torch.float64)).dtype
    seeds = rng.integers(0, 2**31 - 1, size=n_prior)
    out = []
    for seed in seeds:
        sub = np.random.default_rng(int(seed))
        pose = torch.as_tensor(poses[int(sub.integers(len(poses)))], dtype=dtype)
        h, w = pose.shape[-2:] if size is None else size
        cond = frozen.encode_conditions([list(class_tokens)], pose[None])
        img = ancestral_sample(frozen, cond, steps, sub, (1, 3, h, w), dtype=dtype)[0]
        out.append(PriorExample(img, pose, list(class_tokens), int(seed)))
    return out


def denoising_loss(denoiser: Denoiser, images, poses, tokens, rng, t=None, eps=None, weights=None):
    """Mean of ``|eps_hat - eps|^2`` at random timesteps (``t`` in ``[1, T]``)."""
    b = images.shape[0]
    sch = denoiser.schedule
    if t is None:
        t = rng.integers(1, sch.t_max + 1, size=b)
    if eps is None:
        eps = torch.from_numpy(rng.standard_normal(tuple(images.shape))).to(images.dtype)
    a, s = sch.coefficients(t, images.dtype, images.ndim)
    x_t = a * images + s * eps
    cond = denoiser.encode_conditions(tokens, poses)
    err = (denoiser.predict_epsilon(x_t, t, cond) - eps).pow(2).mean(dim=(1, 2, 3))
    if weights is not None:
        err = err * torch.as_tensor(weights, dtype=err.dtype)
    return err.mean()


def rec_loss(denoiser, batch, rng, **kw):
    if not batch:
        raise DomainError("reconstruction batch is empty")
    images, poses, tokens = _stack(batch)
    return denoising_loss(denoiser, images, poses, tokens, rng, **kw)


def cppl_loss(denoiser, batch, rng, **kw):
    if not batch:
        return torch.zeros((), dtype=torch.float64)
    images, poses, tokens = _stack(batch)
    return denoising_loss(denoiser, images, poses, tokens, rng, **kw)


def evaluate_loss(denoiser, batch, seed, repeats=8):
    """Loss with common random numbers: the same ``(t, eps)`` draws for any model."""
    if not batch:
        return 0.0
    images, poses, tokens = _stack(batch)
    rng = np.random.default_rng(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(repeats):
            total += float(denoising_loss(denoiser, images, poses, tokens, rng))
    return total / repeats


@dataclass
class BoothResult:
    denoiser: Denoiser
    history: list = dc_field(default_factory=list)

    def save_history(self, path):
        Path(path).write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in self.history))


def _optimizer(model, lr, lr_text):
    if hasattr(model, "trainable_parameters"):
        params = model.trainable_parameters()
    else:
        params = list(model.parameters())
    emb = getattr(getattr(model, "cond_encoder", None), "token_embedding", None)
    emb_ids = {id(p) for p in emb.parameters()} if emb is not None else set()
    groups = [{"params": [p for p in params if id(p) not in emb_ids], "lr": lr}]
    text = [p for p in params if id(p) in emb_ids]
    if text:
        groups.append({"params": text, "lr": lr_text})
    return torch.optim.Adam(groups)


def finetune(denoiser: Denoiser, fewshot, prior, config: BoothConfig, subject_id=None):
    """Fine-tune a copy of ``denoiser`` on ``L_rec + lambda_cppl * L_cppl``.

    The input model is left untouched. Returns a :class:`BoothResult` with the
    personalized copy and one history record per step.
    """
    if not fewshot:
        raise DomainError("few-shot set is empty")
    if subject_id is None:
        vocab = getattr(denoiser, "vocab", None)
        subject_id = vocab.index[SUBJECT_TOKEN] if vocab is not None else None
    if subject_id is not None and any(subject_id not in ex.tokens for ex in fewshot):
        raise DomainError("every few-shot caption must contain the subject token")
    model = copy.deepcopy(denoiser)
    if config.steps == 0:
        return BoothResult(model, [])
    model.train()
    opt = _optimizer(model, config.lr, config.lr_text)
    rng = np.random.default_rng(config.seed)
    use_prior = bool(prior) and config.lambda_cppl > 0
    history = []
    initial = None
    for step in range(config.steps):
        idx = rng.choice(len(fewshot), size=min(config.batch_size, len(fewshot)), replace=False)
        rec = rec_loss(model, [fewshot[i] for i in idx], rng)
        total = rec
        cppl_val = None
        if use_prior:
            pidx = rng.choice(len(prior), size=min(config.batch_size, len(prior)), replace=False)
            cppl = cppl_loss(model, [prior[i] for i in pidx], rng)
            total = rec + config.lambda_cppl * cppl
            cppl_val = cppl.item()
        value = total.item()
        if not np.isfinite(value):
            raise NumericAbort(f"non-finite loss at step {step}")
        if initial is None:
            initial = value
        elif value > config.divergence_factor * initial:
            raise NumericAbort(f"loss diverged at step {step}: {value:.4g} > {config.divergence_factor:g} x {initial:.4g}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        history.append({"step": step, "total": value, "rec": rec.item(), "cppl": cppl_val})
    model.eval()
    return BoothResult(model, history)


def pretrain(denoiser: Denoiser, examples, steps, rng, lr=2e-3, batch_size=16, cond_dropout=0.1, dtype=torch.float64):
    """Train the base model on class examples with classifier-free condition dropout."""
    vocab = denoiser.vocab
    images = torch.stack([torch.from_numpy(np.ascontiguousarray(e.image.transpose(2, 0, 1))) for e in examples]).to(dtype) * 2 - 1
    poses = torch.stack([torch.from_numpy(np.ascontiguousarray(e.pose.transpose(2, 0, 1))) for e in examples]).to(dtype)
    tokens = [vocab.encode(e.caption) for e in examples]
    opt = torch.optim.Adam(denoiser.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1), eta_min=lr * 0.05)
    sch = denoiser.schedule
    history = []
    for step in range(steps):
        idx = rng.choice(len(examples), size=min(batch_size, len(examples)), replace=False)
        x0 = images[idx]
        t = rng.integers(1, sch.t_max + 1, size=len(idx))
        eps = torch.from_numpy(rng.standard_normal(tuple(x0.shape))).to(dtype)
        null = torch.from_numpy(rng.random(len(idx)) < cond_dropout)
        a, s = sch.coefficients(t, dtype)
        cond = denoiser.encode_conditions([tokens[i] for i in idx], poses[idx], null=null)
        loss = (denoiser.predict_epsilon(a * x0 + s * eps, t, cond) - eps).pow(2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        history.append({"step": step, "loss": loss.item()})
    return history


def windowed_median(values, window):
    v = np.asarray(values, float)
    n = len(v) // window
    return np.array([np.median(v[i * window:(i + 1) * window]) for i in range(n)])
