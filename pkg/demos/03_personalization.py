"""Few-shot personalization with and without the condition prior term.

A small pose-conditioned denoiser is trained on generic class sprites, then
fine-tuned on six images of one subject. The prior term replays images the
frozen base model generated for the class prompt under random poses; without
it the model forgets how to draw the class. Takes about half a minute.
"""
import numpy as np
import torch

from avatarlab.controlbooth import (
    CLASS_PROMPT,
    BoothConfig,
    evaluate_loss,
    fewshot_from_examples,
    finetune,
    generate_prior_set,
    pretrain,
)
from avatarlab.data import class_examples, pose_pool, subject_examples
from avatarlab.guidance import NoiseSchedule, ToyConditionalDenoiser

dt = torch.float32
base = ToyConditionalDenoiser(NoiseSchedule(), channels=16, seed=0).to(dt)
hist = pretrain(base, class_examples(600, 24, seed=1), 600, np.random.default_rng(0), dtype=dt)
print(f"base model loss {hist[0]['loss']:.3f} -> {np.mean([h['loss'] for h in hist[-50:]]):.3f}")

vocab = base.vocab
subject = fewshot_from_examples(subject_examples(6, 24, seed=0), vocab, dt)
print("subject caption:", vocab.decode(subject[0].tokens))

poses = [torch.from_numpy(p.transpose(2, 0, 1).copy()) for _, p in pose_pool(100, 24, seed=5)]
tokens = vocab.encode(CLASS_PROMPT)
prior = generate_prior_set(base, tokens, poses, 40, np.random.default_rng(1), steps=25)
held_out = generate_prior_set(base, tokens, poses, 20, np.random.default_rng(2), steps=25)

for lam in (1.0, 0.0):
    tuned = finetune(base, subject, prior, BoothConfig(lambda_cppl=lam, steps=400, seed=0)).denoiser
    print(f"lambda={lam}: held-out class loss {evaluate_loss(tuned, held_out, 7):.4f}, "
          f"subject loss {evaluate_loss(tuned, subject, 8):.4f}")
print(f"base model: held-out class loss {evaluate_loss(base, held_out, 7):.4f}")
