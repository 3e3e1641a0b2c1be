"""Synthetic few-shot episodes with a controllable image/text information gap.

Each class owns a unit latent concept. Visual tokens see the whole concept
through a fixed orthonormal embedding, mixed with class-agnostic background
clutter living in the orthogonal complement. Text tokens see the concept only
through a rank-limited projection, so lowering ``gap_rank`` strips
information from the text side while images stay complete.
"""

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from otat.golden import write_bundle
from otat.numeric import DegenerateInputError, make_rng

__all__ = [
    "EpisodeSpec",
    "Episode",
    "GenerationError",
    "generate_episode",
    "mnn_alignment",
    "text_nn_accuracy",
    "export_episode",
]

MAX_COSINE = 0.8
MAX_RETRIES = 1000


class GenerationError(RuntimeError):
    """The generator could not satisfy its separation constraints."""


@dataclass(frozen=True)
class EpisodeSpec:
    n_classes: int = 5
    shots: int = 5
    queries: int = 20
    latent_dim: int = 8
    dim: int = 16
    visual_tokens: int = 16
    text_tokens: int = 4
    visual_noise: float = 0.3
    text_noise: float = 0.1
    gap_rank: int = 2
    instance_noise: float = 0.0
    clutter: float = 0.5

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("an episode needs at least one class")
        if self.shots < 1 or self.queries < 0:
            raise ValueError("shots must be >= 1 and queries >= 0")
        if not 1 <= self.gap_rank <= self.latent_dim:
            raise ValueError(f"gap_rank must lie in [1, latent_dim={self.latent_dim}]")
        if self.dim < self.latent_dim:
            raise ValueError("embedding dim must be at least latent_dim")
        if not self.visual_tokens > self.text_tokens >= 1:
            raise ValueError("visual token count must exceed text token count")
        if min(self.visual_noise, self.text_noise, self.instance_noise) < 0:
            raise ValueError("noise levels must be nonnegative")
        if not 0 <= self.clutter < 1:
            raise ValueError("clutter must lie in [0, 1)")

    @property
    def text_length(self):
        return self.text_tokens + 2


@dataclass(frozen=True)
class Episode:
    spec: EpisodeSpec
    seed: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    text: np.ndarray
    latents: np.ndarray

    @property
    def support(self):
        return list(zip(self.support_x, self.support_y.tolist()))

    @property
    def query(self):
        return list(zip(self.query_x, self.query_y.tolist()))


def _separated_latents(rng, n, dim):
    chosen = []
    for _ in range(n):
        for _attempt in range(MAX_RETRIES):
            z = rng.normal(size=dim)
            z /= np.linalg.norm(z)
            if all(float(z @ c) < MAX_COSINE for c in chosen):
                chosen.append(z)
                break
        else:
            raise GenerationError(
                f"could not place {n} latents with pairwise cosine < {MAX_COSINE} in {dim} dims"
            )
    return np.array(chosen)


def generate_episode(spec, seed):
    """Draw one episode; the same ``(spec, seed)`` always gives the same arrays."""
    rng = make_rng(seed, "episode")
    d, k = spec.dim, spec.latent_dim
    latents = _separated_latents(rng, spec.n_classes, k)

    basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
    embed = basis[:, :k]
    complement = basis[:, k:]
    rotation, _ = np.linalg.qr(rng.normal(size=(k, k)))
    keep = rotation[:, : spec.gap_rank]
    text_projector = keep @ keep.T

    n_bg = max(complement.shape[1], 1)
    background = rng.normal(size=(spec.visual_tokens, n_bg))
    background /= np.linalg.norm(background, axis=1, keepdims=True)
    background = background @ complement.T if complement.shape[1] else np.zeros((spec.visual_tokens, d))
    sentinel = rng.normal(size=(2, n_bg)) * 0.1
    sentinel = sentinel @ complement.T if complement.shape[1] else np.zeros((2, d))

    def image(c):
        z = latents[c] + spec.instance_noise * rng.normal(size=k)
        weight = 1.0 - spec.clutter * rng.random(size=(spec.visual_tokens, 1))
        tokens = weight * (embed @ z)[None, :] + (1.0 - weight) * background
        return tokens + spec.visual_noise * rng.normal(size=(spec.visual_tokens, d))

    text = np.empty((spec.n_classes, spec.text_length, d))
    for c in range(spec.n_classes):
        content = embed @ (text_projector @ latents[c])
        scale = 1.0 + 0.25 * rng.normal(size=(spec.text_tokens, 1))
        body = scale * content[None, :] + spec.text_noise * rng.normal(size=(spec.text_tokens, d))
        text[c] = np.vstack([sentinel[:1], body, sentinel[1:]])

    support_y = np.repeat(np.arange(spec.n_classes), spec.shots)
    query_y = np.repeat(np.arange(spec.n_classes), spec.queries)
    support_x = np.array([image(c) for c in support_y]).reshape(-1, spec.visual_tokens, d)
    query_x = np.array([image(c) for c in query_y]).reshape(-1, spec.visual_tokens, d)
    return Episode(spec, int(seed), support_x, support_y, query_x, query_y, text, latents)


def mnn_alignment(image_reprs, text_reprs):
    """Fraction of pairs that are each other's cosine nearest neighbour.

    Row ``i`` of both matrices describes the same item. Pair ``i`` counts when
    text ``i`` is the closest text to image ``i`` and image ``i`` is the
    closest image to text ``i``; ties resolve to the lowest index.
    """
    a = np.asarray(image_reprs, dtype=np.float64)
    b = np.asarray(text_reprs, dtype=np.float64)
    if a.shape[0] == 0:
        raise DegenerateInputError("alignment needs at least one pair")
    if a.shape != b.shape:
        raise ValueError(f"paired representations differ in shape: {a.shape} vs {b.shape}")

    def unit(m):
        n = np.linalg.norm(m, axis=1, keepdims=True)
        return np.divide(m, n, out=np.zeros_like(m), where=n > 0)

    sims = unit(a) @ unit(b).T
    idx = np.arange(a.shape[0])
    nearest_text = np.argmax(sims, axis=1)
    nearest_image = np.argmax(sims, axis=0)
    return float(np.mean((nearest_text == idx) & (nearest_image == idx)))


def text_nn_accuracy(episode):
    """Query accuracy of nearest class text, comparing token means by cosine."""
    q = episode.query_x.mean(axis=1)
    t = episode.text.mean(axis=1)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    pred = np.argmax(q @ t.T, axis=1)
    return float(np.mean(pred == episode.query_y))


def export_episode(episode, directory):
    """Write the episode arrays as matrix files plus a JSON manifest."""
    tensors = {
        "support_x": episode.support_x,
        "query_x": episode.query_x,
        "text": episode.text,
        "latents": episode.latents,
    }
    extra = {
        "seed": episode.seed,
        "spec": asdict(episode.spec),
        "support_y": episode.support_y.tolist(),
        "query_y": episode.query_y.tolist(),
    }
    return write_bundle(Path(directory), tensors, extra)
