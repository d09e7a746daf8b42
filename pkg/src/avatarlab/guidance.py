"""Diffusion machinery: noise schedule, denoisers, conditioning and sampling.

Images are ``(B, 3, H, W)`` tensors in ``[-1, 1]``. Every denoiser predicts
the noise ``eps`` that produced ``x_t = alpha_t * x0 + sigma_t * eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .checkpoint import load_container, load_state_arrays, save_container, state_dict_arrays
from .errors import DomainError, NumericError


class NoiseSchedule:
    """Variance-preserving schedule with ``alpha_t**2 + sigma_t**2 = 1``.

    The default is the cosine schedule: per-step betas come from the ratio of
    squared-cosine signal levels, clipped at ``max_beta``, and the cumulative
    product defines ``alpha_t``. Step 0 is noise free.
    """

    def __init__(self, t_max=1000, kind="cosine", offset=0.008, max_beta=0.999):
        if kind not in ("cosine", "linear"):
            raise DomainError(f"unknown schedule kind {kind!r}")
        self.t_max = int(t_max)
        self.kind = kind
        steps = np.arange(self.t_max + 1, dtype=np.float64)
        if kind == "cosine":
            f = np.cos((steps / self.t_max + offset) / (1 + offset) * np.pi / 2) ** 2
            betas = np.clip(1 - f[1:] / f[:-1], 0.0, max_beta)
        else:
            betas = np.linspace(1e-4, 2e-2, self.t_max)
        self.betas = np.concatenate([[0.0], betas])
        self.alpha_bar = np.cumprod(1 - self.betas)
        self.alpha = np.sqrt(self.alpha_bar)
        self.sigma = np.sqrt(1 - self.alpha_bar)

    def _check(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.t_max):
            raise DomainError(f"timestep outside [0, {self.t_max}]")
        return t.astype(np.int64)

    def coefficients(self, t, dtype=torch.float64, ndim=4):
        """``(alpha_t, sigma_t)`` as tensors broadcastable against a batch of images."""
        t = self._check(t)
        shape = (-1,) + (1,) * (ndim - 1) if t.ndim else ()
        a = torch.as_tensor(self.alpha[t], dtype=dtype).reshape(shape)
        s = torch.as_tensor(self.sigma[t], dtype=dtype).reshape(shape)
        return a, s


def add_noise(schedule: NoiseSchedule, x0, t, eps):
    """``alpha_t * x0 + sigma_t * eps``; ``t`` is a scalar or one step per batch row."""
    if x0.shape != eps.shape:
        raise DomainError(f"shape mismatch {tuple(x0.shape)} vs {tuple(eps.shape)}")
    a, s = schedule.coefficients(t, x0.dtype, x0.ndim)
    return a * x0 + s * eps


def timestep_embedding(t, dim, t_max):
    t = torch.as_tensor(np.asarray(t, dtype=np.float64)).reshape(-1) * (1000.0 / t_max)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], -1)


# --------------------------------------------------------------------------- conditioning

SUBJECT_TOKEN = "sks"

DEFAULT_VOCAB = [
    "<pad>", SUBJECT_TOKEN, "a", "photo", "of", "person", "man", "woman", "standing", "full", "body",
    "face", "hand", "head", "front", "back", "side", "view", "wearing", "shirt", "pants", "striped",
    "plain", "red", "green", "blue", "yellow", "white", "black", "orange", "purple", "arms", "raised",
    "lowered", "walking", "waving", "sphere", "avatar", "in", "the", "and",
]


class Vocabulary:
    """Token list where the line number (0-based) is the token id."""

    def __init__(self, tokens=None):
        self.tokens = list(tokens or DEFAULT_VOCAB)
        if len(set(self.tokens)) != len(self.tokens):
            raise DomainError("duplicate tokens in vocabulary")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, text):
        words = text.split() if isinstance(text, str) else list(text)
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise DomainError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids):
        return " ".join(self.tokens[i] for i in ids)

    @property
    def subject_id(self):
        return self.index[SUBJECT_TOKEN]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        return cls([line for line in Path(path).read_text().splitlines() if line])


@dataclass
class ConditioningBundle:
    """Conditioning for a batch.

    ``text`` is ``(B, D)``; ``pose`` is a ``(B, C, H, W)`` feature map (or
    ``None`` for denoisers that do not consume one); ``pose_image`` keeps the
    raw ``(B, 3, H, W)`` pose image in ``[0, 1]``; ``null`` marks rows that
    carry the learned unconditional embedding. ``meta`` holds per-batch side
    information (e.g. the camera the pose image was rasterized from).
    """

    text: torch.Tensor | None
    pose: torch.Tensor | None
    pose_image: torch.Tensor | None
    null: torch.Tensor
    tokens: list = dc_field(default_factory=list)
    meta: dict = dc_field(default_factory=dict)

    def __len__(self):
        return int(self.null.shape[0])


class ConditionEncoder(nn.Module):
    """Token embedding table, a small text encoder, and a convolutional pose block."""

    def __init__(self, vocab: Vocabulary, text_dim=64, pose_channels=32, generator=None):
        super().__init__()
        self.vocab = vocab
        self.token_embedding = nn.Embedding(len(vocab), text_dim)
        self.text_encoder = nn.Sequential(nn.Linear(text_dim, text_dim), nn.SiLU(), nn.Linear(text_dim, text_dim))
        self.pose_block = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.SiLU(),
            nn.Conv2d(16, pose_channels, 3, padding=1), nn.SiLU(),
            nn.Conv2d(pose_channels, pose_channels, 3, padding=1),
        )
        self.null_text = nn.Parameter(torch.zeros(text_dim))
        self.null_pose = nn.Parameter(torch.zeros(pose_channels))
        _reinit(self, generator)
        with torch.no_grad():
            self.null_text.normal_(0.0, 0.5, generator=generator)
            self.null_pose.normal_(0.0, 0.5, generator=generator)

    def embed_tokens(self, token_ids):
        """Mean of token embedding rows per prompt, passed through the text encoder."""
        rows = []
        for ids in token_ids:
            idx = torch.as_tensor(ids, dtype=torch.int64)
            if idx.numel() == 0 or idx.min() < 0 or idx.max() >= len(self.vocab):
                raise DomainError(f"token ids {ids} outside vocabulary of size {len(self.vocab)}")
            rows.append(self.token_embedding(idx).mean(0))
        return self.text_encoder(torch.stack(rows))

    def forward(self, token_ids, pose_images, null=None):
        b = len(token_ids)
        text = self.embed_tokens(token_ids)
        pose = self.pose_block(pose_images * 2 - 1)
        null = torch.zeros(b, dtype=torch.bool) if null is None else torch.as_tensor(null, dtype=torch.bool)
        if bool(null.any()):
            text = torch.where(null[:, None], self.null_text.expand_as(text), text)
            pose = torch.where(null[:, None, None, None], self.null_pose[None, :, None, None].expand_as(pose), pose)
        return text, pose


def _reinit(module, generator):
    """Deterministic re-initialization of conv/linear/embedding weights from ``generator``."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-math.sqrt(3.0) * bound, math.sqrt(3.0) * bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, nn.Embedding):
            with torch.no_grad():
                m.weight.normal_(0.0, 1.0, generator=generator)


# --------------------------------------------------------------------------- denoisers


class Denoiser(nn.Module):
    """Conditional epsilon predictor."""

    schedule: NoiseSchedule

    def predict_epsilon(self, x_t, t, cond: ConditioningBundle):
        raise NotImplementedError

    def encode_conditions(self, tokens, pose_images, null=None, meta=None) -> ConditioningBundle:
        raise NotImplementedError

    def null_conditions(self, cond: ConditioningBundle) -> ConditioningBundle:
        return self.encode_conditions(cond.tokens, cond.pose_image, null=torch.ones(len(cond), dtype=torch.bool),
                                      meta=cond.meta)


class AnalyticGaussianDenoiser(Denoiser):
    """Exact posterior noise predictor for data ``x0 ~ N(mean, std**2 I)``.

    With ``x_t = a x0 + s eps``::

        E[x0 | x_t] = (a std^2 x_t + s^2 mean) / (a^2 std^2 + s^2)
        eps_hat     = (x_t - a E[x0 | x_t]) / s

    ``mean`` is a scalar, an image array, or a callable mapping a
    :class:`ConditioningBundle` to a ``(B, 3, H, W)`` mean; the callable form
    makes a view-dependent ("multi-view") prior. Null-conditioned rows use
    ``null_mean`` (default: ``mean``).
    """

    def __init__(self, schedule: NoiseSchedule, mean=0.0, std=1.0, null_mean=None):
        super().__init__()
        self.schedule = schedule
        self.mean = mean
        self.null_mean = mean if null_mean is None else null_mean
        self.std = float(std)

    def _mean_for(self, mean, cond, like):
        if callable(mean):
            m = mean(cond)
        else:
            m = mean
        return torch.as_tensor(np.asarray(m) if not isinstance(m, torch.Tensor) else m, dtype=like.dtype).expand_as(like)

    def posterior_mean(self, x_t, t, cond=None):
        a, s = self.schedule.coefficients(t, x_t.dtype, x_t.ndim)
        mu = self._mean_for(self.mean, cond, x_t)
        if cond is not None and bool(cond.null.any()):
            mu_null = self._mean_for(self.null_mean, cond, x_t)
            mu = torch.where(cond.null.reshape(-1, 1, 1, 1), mu_null, mu)
        v = self.std**2
        return (a * v * x_t + s**2 * mu) / (a**2 * v + s**2)

    def predict_epsilon(self, x_t, t, cond=None):
        a, s = self.schedule.coefficients(t, x_t.dtype, x_t.ndim)
        x0 = self.posterior_mean(x_t, t, cond)
        safe = torch.where(s > 0, s, torch.ones_like(s))
        return torch.where(s > 0, (x_t - a * x0) / safe, torch.zeros_like(x_t))

    def encode_conditions(self, tokens, pose_images, null=None, meta=None):
        b = len(tokens)
        null = torch.zeros(b, dtype=torch.bool) if null is None else torch.as_tensor(null, dtype=torch.bool)
        return ConditioningBundle(None, None, pose_images, null, list(tokens), dict(meta or {}))


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class ToyConditionalDenoiser(Denoiser):
    """Two-level convolutional U-Net conditioned on time, text and a pose map.

    The pose features are injected additively after the input convolution,
    the text and time embeddings modulate every residual block. Image sides
    must be divisible by 2.
    """

    def __init__(self, schedule: NoiseSchedule, vocab: Vocabulary | None = None, channels=32, text_dim=64,
                 emb_dim=128, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        self.schedule = schedule
        self.vocab = vocab or Vocabulary()
        self.hparams = {"channels": channels, "text_dim": text_dim, "emb_dim": emb_dim, "t_max": schedule.t_max,
                        "schedule": schedule.kind}
        c = channels
        self.cond_encoder = ConditionEncoder(self.vocab, text_dim, pose_channels=c, generator=gen)
        self.time_mlp = nn.Sequential(nn.Linear(64, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.text_proj = nn.Linear(text_dim, emb_dim)
        self.conv_in = nn.Conv2d(3, c, 3, padding=1)
        self.down1 = ResBlock(c, c, emb_dim)
        self.downsample = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.mid1 = ResBlock(2 * c, 2 * c, emb_dim)
        self.mid2 = ResBlock(2 * c, 2 * c, emb_dim)
        self.up1 = ResBlock(3 * c, c, emb_dim)
        self.conv_out = nn.Sequential(nn.GroupNorm(8, c), nn.SiLU(), nn.Conv2d(c, 3, 3, padding=1))
        for name, mod in self.named_children():
            if name != "cond_encoder":
                _reinit(mod, gen)
        with torch.no_grad():
            self.conv_out[-1].weight.mul_(0.1)

    def encode_conditions(self, tokens, pose_images, null=None, meta=None):
        pose_images = torch.as_tensor(pose_images, dtype=self.dtype)
        text, pose = self.cond_encoder(tokens, pose_images, null)
        null = torch.zeros(len(tokens), dtype=torch.bool) if null is None else torch.as_tensor(null, dtype=torch.bool)
        return ConditioningBundle(text, pose, pose_images, null, list(tokens), dict(meta or {}))

    @property
    def dtype(self):
        return self.conv_in.weight.dtype

    def predict_epsilon(self, x_t, t, cond: ConditioningBundle):
        b = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (b,))
        self.schedule._check(t)
        emb = self.time_mlp(timestep_embedding(t, 64, self.schedule.t_max).to(x_t.dtype))
        emb = emb + self.text_proj(cond.text)
        pose = cond.pose
        if pose.shape[-2:] != x_t.shape[-2:]:
            pose = F.interpolate(pose, size=x_t.shape[-2:], mode="bilinear", align_corners=False)
        h0 = self.conv_in(x_t) + pose
        h1 = self.down1(h0, emb)
        h2 = self.mid2(self.mid1(self.downsample(h1), emb), emb)
        up = F.interpolate(h2, size=h1.shape[-2:], mode="nearest")
        h = self.up1(torch.cat([up, h1], 1), emb)
        return self.conv_out(h)

    def trainable_parameters(self):
        """Parameters updated during personalization (pose block excluded)."""
        frozen = {id(p) for p in self.cond_encoder.pose_block.parameters()} | {id(self.cond_encoder.null_pose)}
        return [p for p in self.parameters() if id(p) not in frozen]

    def save(self, path):
        meta = {"hparams": self.hparams, "vocab": self.vocab.tokens}
        return save_container(path, "denoiser", meta, state_dict_arrays(self))

    @classmethod
    def load(cls, path, dtype=torch.float64):
        meta, arrays = load_container(path, kind="denoiser")
        hp = meta["hparams"]
        schedule = NoiseSchedule(hp["t_max"], hp["schedule"])
        model = cls(schedule, Vocabulary(meta["vocab"]), hp["channels"], hp["text_dim"], hp["emb_dim"]).to(dtype)
        return load_state_arrays(model, arrays)


def encode_conditions(denoiser: Denoiser, tokens, pose_images, null=None, meta=None):
    """Text/pose conditioning for ``denoiser``; ``tokens`` is a list of id lists."""
    return denoiser.encode_conditions(tokens, pose_images, null=null, meta=meta)


def cfg_epsilon(denoiser: Denoiser, x_t, t, cond: ConditioningBundle, guidance_weight, null_cond=None):
    """Classifier-free guidance: ``eps_null + w (eps_cond - eps_null)``."""
    if guidance_weight == 1:
        return denoiser.predict_epsilon(x_t, t, cond)
    null_cond = null_cond if null_cond is not None else denoiser.null_conditions(cond)
    eps_null = denoiser.predict_epsilon(x_t, t, null_cond)
    if guidance_weight == 0:
        return eps_null
    eps_cond = denoiser.predict_epsilon(x_t, t, cond)
    return eps_null + guidance_weight * (eps_cond - eps_null)


def sampling_timesteps(schedule, steps):
    if not 1 <= steps <= schedule.t_max:
        raise DomainError(f"steps must lie in [1, {schedule.t_max}]")
    return np.round(np.linspace(schedule.t_max, 0, steps + 1)).astype(np.int64)


def ancestral_sample(denoiser: Denoiser, cond: ConditioningBundle, steps, rng, shape, guidance_weight=1.0,
                     clip=True, dtype=torch.float64):
    """DDPM ancestral sampling from pure noise over ``steps`` strided timesteps.

    Each transition ``t -> s`` draws from the Gaussian posterior
    ``q(x_s | x_t, x0_hat)`` with ``x0_hat`` recovered from the predicted
    noise (optionally clipped to ``[-1, 1]``). ``rng`` is a numpy Generator.
    """
    sch = denoiser.schedule
    ts = sampling_timesteps(sch, steps)
    x = torch.from_numpy(rng.standard_normal(shape)).to(dtype)
    with torch.no_grad():
        for i, (t, s) in enumerate(zip(ts[:-1], ts[1:])):
            eps = cfg_epsilon(denoiser, x, int(t), cond, guidance_weight)
            ab_t, ab_s = sch.alpha_bar[t], sch.alpha_bar[s]
            x0 = (x - math.sqrt(1 - ab_t) * eps) / math.sqrt(ab_t)
            if clip:
                x0 = x0.clamp(-1.0, 1.0)
            ratio = ab_t / ab_s
            c0 = math.sqrt(ab_s) * (1 - ratio) / (1 - ab_t)
            ct = math.sqrt(ratio) * (1 - ab_s) / (1 - ab_t)
            var = (1 - ab_s) / (1 - ab_t) * (1 - ratio)
            x = c0 * x0 + ct * x
            if var > 0:
                x = x + math.sqrt(var) * torch.from_numpy(rng.standard_normal(shape)).to(dtype)
            if not bool(torch.isfinite(x).all()):
                raise NumericError("non-finite sample", where=f"step {i} (t={t})")
    return x
